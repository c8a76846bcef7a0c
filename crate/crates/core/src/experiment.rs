//! The setting matrix: every row trained under every seed, evaluated on all
//! directions and probed, with a checksum-keyed cache so a rerun only trains
//! the cells that are missing or stale.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    generate_corpus, read_pairs, write_pairs, CorpusConfig, LanguageSet, ParallelCorpus, TagScheme,
};
use crate::eval::{
    average, evaluate_directions, evaluate_pivot, paired_bootstrap, DecodeConfig, DirectionResult,
    Translator, DEFAULT_RESAMPLES,
};
use crate::model::{default_ablation_layer, ModelConfig, NormParams, NormPlacement};
use crate::probes::{
    collect_traces, encoder_svcca, eval_llr, train_all_llr, DirectionClass, LlrReport, LlrRow,
    ProbeConfig,
};
use crate::training::{train, TrainConfig, TrainOutputs};
use crate::{Error, Result};

/// One line of the setting table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingRow {
    pub id: String,
    pub norm_placement: NormPlacement,
    #[serde(default = "trainable")]
    pub norm_params: NormParams,
    pub tag_scheme: TagScheme,
    /// Whether the middle encoder layer keeps its self-attention residual.
    pub residual: bool,
}

fn trainable() -> NormParams {
    NormParams::Trainable
}

impl SettingRow {
    pub fn new(id: &str, placement: NormPlacement, scheme: TagScheme, residual: bool) -> Self {
        SettingRow {
            id: id.to_string(),
            norm_placement: placement,
            norm_params: NormParams::Trainable,
            tag_scheme: scheme,
            residual,
        }
    }

    pub fn simple(mut self) -> Self {
        self.norm_params = NormParams::Simple;
        self
    }

    /// The row's model: `base` with the row's axes and the cell seed.
    pub fn model_config(&self, base: &ModelConfig, seed: u64) -> ModelConfig {
        ModelConfig {
            norm_placement: self.norm_placement,
            norm_params: self.norm_params,
            tag_scheme: self.tag_scheme,
            ablate_sa_residual_at: (!self.residual)
                .then(|| default_ablation_layer(base.encoder_layers)),
            seed,
            ..base.clone()
        }
    }

    pub fn norm_label(&self) -> String {
        match self.norm_params {
            NormParams::Trainable => self.norm_placement.label().to_string(),
            NormParams::Simple => format!("{}-simple", self.norm_placement.label()),
        }
    }

    pub fn residual_label(&self) -> &'static str {
        if self.residual {
            "w/"
        } else {
            "w/o"
        }
    }

    /// Directory-safe form of the id.
    pub fn slug(&self) -> String {
        let s: String = self
            .id
            .chars()
            .filter_map(|c| match c {
                'a'..='z' | 'A'..='Z' | '0'..='9' | '-' | '_' => Some(c),
                ' ' | '/' => Some('_'),
                _ => None,
            })
            .collect();
        if s.is_empty() {
            "row".into()
        } else {
            s
        }
    }

    fn axes(&self) -> (NormParams, TagScheme, bool) {
        (self.norm_params, self.tag_scheme, self.residual)
    }
}

/// Rows #1 to #8: PreNorm and PostNorm under both tag schemes, with and
/// without the middle self-attention residual.
pub fn default_rows() -> Vec<SettingRow> {
    use NormPlacement::{PostNorm, PreNorm};
    use TagScheme::{SEncTDec, TEnc};
    vec![
        SettingRow::new("#1", PreNorm, SEncTDec, true),
        SettingRow::new("#2", PostNorm, SEncTDec, true),
        SettingRow::new("#3", PreNorm, TEnc, true),
        SettingRow::new("#4", PostNorm, TEnc, true),
        SettingRow::new("#5", PreNorm, SEncTDec, false),
        SettingRow::new("#6", PostNorm, SEncTDec, false),
        SettingRow::new("#7", PreNorm, TEnc, false),
        SettingRow::new("#8", PostNorm, TEnc, false),
    ]
}

/// Optional rows: the parameter-free norm variant of every default row,
/// Swap-PreNorm for the source-tagged rows, and PreNorm without the
/// encoder's final norm.
pub fn extension_rows() -> Vec<SettingRow> {
    let mut rows: Vec<SettingRow> = default_rows()
        .into_iter()
        .map(|r| {
            let id = format!("{}s", r.id);
            SettingRow { id, ..r.simple() }
        })
        .collect();
    rows.push(SettingRow::new(
        "#1w",
        NormPlacement::SwapPreNorm,
        TagScheme::SEncTDec,
        true,
    ));
    rows.push(SettingRow::new(
        "#5w",
        NormPlacement::SwapPreNorm,
        TagScheme::SEncTDec,
        false,
    ));
    rows.push(SettingRow::new(
        "#1e",
        NormPlacement::PreNormWoEncLast,
        TagScheme::SEncTDec,
        true,
    ));
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub llr: bool,
    pub svcca: bool,
    /// Test sentences per language for SVCCA.
    pub svcca_sentences: usize,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Row whose model also produces the pivot baseline.
    pub pivot_row: Option<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            llr: true,
            svcca: true,
            svcca_sentences: 200,
            bootstrap_resamples: DEFAULT_RESAMPLES,
            bootstrap_seed: 12345,
            pivot_row: Some("#4".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub rows: Vec<SettingRow>,
    pub seeds: Vec<u64>,
    pub corpus: CorpusConfig,
    /// Shared dimensions; each row overrides its own axes and the seed.
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub decode: DecodeConfig,
    pub probe: ProbeConfig,
    pub analysis: AnalysisConfig,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            rows: default_rows(),
            seeds: vec![1, 10, 20],
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            decode: DecodeConfig::default(),
            probe: ProbeConfig::default(),
            analysis: AnalysisConfig::default(),
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.rows.is_empty() {
            return Err(Error::Config("no setting rows".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        for (i, r) in self.rows.iter().enumerate() {
            for s in &self.rows[..i] {
                if s.id == r.id || s.slug() == r.slug() {
                    return Err(Error::Config(format!("duplicate row id {}", r.id)));
                }
                if s.norm_placement == r.norm_placement && s.axes() == r.axes() {
                    return Err(Error::Config(format!(
                        "rows {} and {} are the same setting",
                        s.id, r.id
                    )));
                }
            }
        }
        if let Some(p) = &self.analysis.pivot_row {
            if !self.rows.iter().any(|r| &r.id == p) {
                return Err(Error::Config(format!("pivot row {p} is not in the matrix")));
            }
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("beam size must be positive".into()));
        }
        self.corpus.validate()?;
        self.training.schedule()?;
        for r in &self.rows {
            let mut mc = r.model_config(&self.model, self.seeds[0]);
            mc.vocab_size = 1;
            mc.validate()?;
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.rows.len() * self.seeds.len()
    }

    pub fn cell_dir(&self, row: &SettingRow, seed: u64) -> PathBuf {
        self.out
            .join("cells")
            .join(format!("{}-s{seed}", row.slug()))
    }

    /// Hash of everything that determines a cell's result.
    pub fn cell_checksum(&self, row: &SettingRow, seed: u64) -> String {
        #[derive(Serialize)]
        struct CellInputs<'a> {
            version: u32,
            row: &'a SettingRow,
            seed: u64,
            corpus: &'a CorpusConfig,
            model: ModelConfig,
            training: &'a TrainConfig,
            decode: &'a DecodeConfig,
            probe: &'a ProbeConfig,
            llr: bool,
            svcca: bool,
            svcca_sentences: usize,
            pivot: bool,
        }
        let inputs = CellInputs {
            version: 1,
            row,
            seed,
            corpus: &self.corpus,
            model: row.model_config(&self.model, seed),
            training: &TrainConfig {
                seed,
                ..self.training.clone()
            },
            decode: &self.decode,
            probe: &self.probe,
            llr: self.analysis.llr,
            svcca: self.analysis.svcca,
            svcca_sentences: self.analysis.svcca_sentences,
            pivot: self.is_pivot(row),
        };
        sha256_hex(
            serde_json::to_string(&inputs)
                .expect("plain data")
                .as_bytes(),
        )
    }

    fn is_pivot(&self, row: &SettingRow) -> bool {
        self.analysis.pivot_row.as_deref() == Some(row.id.as_str())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellTimings {
    pub train: f64,
    pub evaluate: f64,
    pub probes: f64,
}

/// Everything one (row, seed) cell produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: String,
    pub seed: u64,
    pub input_checksum: String,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_loss: Option<f64>,
    pub directions: Vec<DirectionResult>,
    pub supervised_bleu: f64,
    pub supervised_off_target: f64,
    pub zero_shot_bleu: f64,
    pub zero_shot_off_target: f64,
    pub llr: Option<LlrReport>,
    /// Encoder layer-wise SVCCA between `en-xx` and `xx-en`.
    pub svcca: Option<Vec<f64>>,
    /// Zero-shot directions translated through English.
    pub pivot: Option<Vec<DirectionResult>>,
    pub timings: CellTimings,
}

impl CellResult {
    pub fn class(&self, class: DirectionClass) -> Vec<&DirectionResult> {
        self.directions
            .iter()
            .filter(|d| DirectionClass::of(&d.direction()) == class)
            .collect()
    }
}

pub const CELL_FILE: &str = "cell.json";
pub const CELL_HASH_FILE: &str = "cell.sha256";

/// Loads a finished cell if its inputs still match and its file is intact.
pub fn load_cached_cell(dir: &Path, checksum: &str) -> Option<CellResult> {
    let bytes = fs::read(dir.join(CELL_FILE)).ok()?;
    let recorded = fs::read_to_string(dir.join(CELL_HASH_FILE)).ok()?;
    if recorded.trim() != sha256_hex(&bytes) {
        return None;
    }
    let cell: CellResult = serde_json::from_slice(&bytes).ok()?;
    (cell.input_checksum == checksum).then_some(cell)
}

fn store_cell(dir: &Path, cell: &CellResult) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(cell)?;
    fs::write(dir.join(CELL_FILE), &bytes)?;
    fs::write(dir.join(CELL_HASH_FILE), sha256_hex(&bytes) + "\n")?;
    Ok(())
}

const CORPUS_DIR: &str = "corpus";
const CORPUS_CONFIG_FILE: &str = "corpus.json";

/// Reads the corpus under `dir` when it was generated from `config`,
/// otherwise generates it and writes it there.
pub fn prepare_corpus(config: &CorpusConfig, dir: &Path) -> Result<ParallelCorpus> {
    let cfg_path = dir.join(CORPUS_CONFIG_FILE);
    let split_path = |name: &str| dir.join(format!("{name}.tsv"));
    let stored: Option<CorpusConfig> = fs::read(&cfg_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    if stored.as_ref() == Some(config) {
        let read = |name: &str| -> Result<_> {
            read_pairs(BufReader::new(fs::File::open(split_path(name))?))
        };
        if let (Ok(train), Ok(valid), Ok(test)) = (read("train"), read("valid"), read("test")) {
            return Ok(ParallelCorpus {
                config: config.clone(),
                languages: LanguageSet::synthetic(config.languages, config.concepts),
                train,
                valid,
                test,
            });
        }
    }
    let corpus = generate_corpus(config)?;
    fs::create_dir_all(dir)?;
    for (name, pairs) in [
        ("train", &corpus.train),
        ("valid", &corpus.valid),
        ("test", &corpus.test),
    ] {
        let mut w = BufWriter::new(fs::File::create(split_path(name))?);
        write_pairs(pairs, &mut w)?;
    }
    fs::write(&cfg_path, serde_json::to_vec_pretty(config)?)?;
    Ok(corpus)
}

/// Reads a corpus directory written by [`prepare_corpus`].
pub fn load_corpus_dir(dir: &Path) -> Result<ParallelCorpus> {
    let bytes = fs::read(dir.join(CORPUS_CONFIG_FILE))
        .map_err(|e| Error::Input(format!("{}: no corpus config: {e}", dir.display())))?;
    let config: CorpusConfig = serde_json::from_slice(&bytes)?;
    prepare_corpus(&config, dir)
}

/// Trains, evaluates and probes one cell, writing its artifacts to `dir`.
pub fn run_cell(
    spec: &ExperimentSpec,
    corpus: &ParallelCorpus,
    row: &SettingRow,
    seed: u64,
    dir: &Path,
) -> Result<CellResult> {
    fs::create_dir_all(dir)?;
    let started = Instant::now();
    let training = TrainConfig {
        seed,
        ..spec.training.clone()
    };
    let state = train(
        &row.model_config(&spec.model, seed),
        corpus,
        &training,
        &TrainOutputs {
            dir: Some(dir),
            ..Default::default()
        },
    )?;
    let train_secs = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let vocab = corpus.vocabulary();
    let translator = Translator {
        model: &state.model,
        vocab: &vocab,
        languages: &corpus.languages,
        decode: spec.decode,
    };
    let supervised = corpus.languages.supervised_directions();
    let zero_shot = corpus.languages.zero_shot_directions();
    let mut all = supervised.clone();
    all.extend(zero_shot.iter().cloned());
    let directions = evaluate_directions(&translator, &corpus.test, &all)?;
    let pivot = if spec.is_pivot(row) {
        Some(evaluate_pivot(&translator, &corpus.test, &zero_shot)?)
    } else {
        None
    };
    let eval_secs = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let llr = if spec.analysis.llr {
        let extra = spec.decode.extra_len;
        let fit = collect_traces(
            &state.model,
            &vocab,
            &corpus.languages,
            &corpus.valid,
            &supervised,
            extra,
        )?;
        let probes = train_all_llr(&fit, &spec.probe)?;
        let test = collect_traces(
            &state.model,
            &vocab,
            &corpus.languages,
            &corpus.test,
            &all,
            extra,
        )?;
        Some(eval_llr(&probes, &test)?)
    } else {
        None
    };
    let svcca = if spec.analysis.svcca {
        Some(encoder_svcca(
            &state.model,
            &vocab,
            &corpus.languages,
            &corpus.test,
            spec.analysis.svcca_sentences,
        )?)
    } else {
        None
    };

    let mut cell = CellResult {
        row: row.id.clone(),
        seed,
        input_checksum: spec.cell_checksum(row, seed),
        epochs_run: state.epoch,
        best_epoch: state.best_epoch,
        best_valid_loss: state.best_valid_loss,
        supervised_bleu: 0.0,
        supervised_off_target: 0.0,
        zero_shot_bleu: 0.0,
        zero_shot_off_target: 0.0,
        directions,
        llr,
        svcca,
        pivot,
        timings: CellTimings {
            train: train_secs,
            evaluate: eval_secs,
            probes: started.elapsed().as_secs_f64(),
        },
    };
    (cell.supervised_bleu, cell.supervised_off_target) =
        average(&cell.class(DirectionClass::Supervised));
    (cell.zero_shot_bleu, cell.zero_shot_off_target) =
        average(&cell.class(DirectionClass::ZeroShot));
    store_cell(dir, &cell)?;
    Ok(cell)
}

/// Mean over seeds of one row's cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: SettingRow,
    pub seeds: Vec<u64>,
    pub supervised_bleu: f64,
    pub supervised_off_target: f64,
    pub zero_shot_bleu: f64,
    pub zero_shot_off_target: f64,
    pub llr: Option<Vec<LlrRow>>,
    pub svcca: Option<Vec<f64>>,
}

/// A row against the PostNorm row sharing its other axes, on pooled
/// hypotheses of every common seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub row: String,
    pub baseline: String,
    pub split: DirectionClass,
    pub row_bleu: f64,
    pub baseline_bleu: f64,
    /// Bootstrap p-value that `row` is better than `baseline`.
    pub p_row_better: f64,
    pub p_baseline_better: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PivotSummary {
    pub row: String,
    pub seeds: Vec<u64>,
    pub zero_shot_bleu: f64,
    pub zero_shot_off_target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub row: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<SettingRow>,
    pub seeds: Vec<u64>,
    pub languages: Vec<String>,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Row-major over `rows` then `seeds`; failed cells are absent.
    pub cells: Vec<CellResult>,
    pub summaries: Vec<RowSummary>,
    pub pivot: Option<PivotSummary>,
    pub significance: Vec<Significance>,
    /// Per-direction p-values `(row, seed, direction index)` against the
    /// paired PostNorm cell.
    pub direction_p_values: Vec<(String, u64, usize, f64)>,
    pub failures: Vec<CellFailure>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn mean_llr(reports: &[&LlrReport]) -> Vec<LlrRow> {
    let mut acc: BTreeMap<(usize, String, String), (LlrRow, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            acc.entry((row.layer, row.kind.to_string(), row.split.to_string()))
                .or_insert_with(|| (row.clone(), Vec::new()))
                .1
                .push(row.accuracy);
        }
    }
    let mut rows: Vec<LlrRow> = acc
        .into_values()
        .map(|(mut row, vals)| {
            row.accuracy = mean(vals);
            row
        })
        .collect();
    rows.sort_by_key(|r| (r.split as u8, r.kind as u8, r.layer));
    rows
}

impl ExperimentReport {
    pub fn cell(&self, row: &str, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.row == row && c.seed == seed)
    }

    pub fn summary(&self, row: &str) -> Option<&RowSummary> {
        self.summaries.iter().find(|s| s.row.id == row)
    }

    /// The PostNorm row sharing every other axis with `row`.
    pub fn baseline_of(&self, row: &SettingRow) -> Option<&SettingRow> {
        if row.norm_placement == NormPlacement::PostNorm {
            return None;
        }
        self.rows
            .iter()
            .find(|r| r.norm_placement == NormPlacement::PostNorm && r.axes() == row.axes())
    }

    /// Checks that every stored average equals the mean of its details.
    pub fn check_consistency(&self) -> Result<()> {
        let close =
            |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs()) || (a.is_nan() && b.is_nan());
        for c in &self.cells {
            for class in [DirectionClass::Supervised, DirectionClass::ZeroShot] {
                let (bleu, off) = average(&c.class(class));
                let (sb, so) = match class {
                    DirectionClass::Supervised => (c.supervised_bleu, c.supervised_off_target),
                    DirectionClass::ZeroShot => (c.zero_shot_bleu, c.zero_shot_off_target),
                };
                if !close(bleu, sb) || !close(off, so) {
                    return Err(Error::Domain(format!(
                        "cell {} seed {}: {class} average does not match its directions",
                        c.row, c.seed
                    )));
                }
            }
        }
        for s in &self.summaries {
            let cells: Vec<&CellResult> = self.cells.iter().filter(|c| c.row == s.row.id).collect();
            let pairs = [
                (
                    s.supervised_bleu,
                    mean(cells.iter().map(|c| c.supervised_bleu)),
                ),
                (
                    s.supervised_off_target,
                    mean(cells.iter().map(|c| c.supervised_off_target)),
                ),
                (
                    s.zero_shot_bleu,
                    mean(cells.iter().map(|c| c.zero_shot_bleu)),
                ),
                (
                    s.zero_shot_off_target,
                    mean(cells.iter().map(|c| c.zero_shot_off_target)),
                ),
            ];
            if pairs.iter().any(|&(a, b)| !close(a, b)) {
                return Err(Error::Domain(format!(
                    "row {} summary does not match its cells",
                    s.row.id
                )));
            }
        }
        Ok(())
    }
}

/// Builds the report from finished cells. Significance tests pool the
/// hypotheses of all seeds both cells of a pair have.
pub fn assemble_report(
    spec: &ExperimentSpec,
    corpus: &ParallelCorpus,
    cells: Vec<CellResult>,
    failures: Vec<CellFailure>,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport {
        rows: spec.rows.clone(),
        seeds: spec.seeds.clone(),
        languages: corpus.languages.ids(),
        encoder_layers: spec.model.encoder_layers,
        decoder_layers: spec.model.decoder_layers,
        cells,
        summaries: Vec::new(),
        pivot: None,
        significance: Vec::new(),
        direction_p_values: Vec::new(),
        failures,
    };
    for row in &spec.rows {
        let cells: Vec<&CellResult> = report.cells.iter().filter(|c| c.row == row.id).collect();
        if cells.is_empty() {
            continue;
        }
        let llrs: Option<Vec<&LlrReport>> = cells.iter().map(|c| c.llr.as_ref()).collect();
        let svccas: Option<Vec<&Vec<f64>>> = cells.iter().map(|c| c.svcca.as_ref()).collect();
        report.summaries.push(RowSummary {
            row: row.clone(),
            seeds: cells.iter().map(|c| c.seed).collect(),
            supervised_bleu: mean(cells.iter().map(|c| c.supervised_bleu)),
            supervised_off_target: mean(cells.iter().map(|c| c.supervised_off_target)),
            zero_shot_bleu: mean(cells.iter().map(|c| c.zero_shot_bleu)),
            zero_shot_off_target: mean(cells.iter().map(|c| c.zero_shot_off_target)),
            llr: llrs.map(|r| mean_llr(&r)),
            svcca: svccas.map(|v| {
                (0..v[0].len())
                    .map(|l| mean(v.iter().map(|s| s[l])))
                    .collect()
            }),
        });
    }
    if let Some(pivot_row) = &spec.analysis.pivot_row {
        let runs: Vec<(u64, &Vec<DirectionResult>)> = report
            .cells
            .iter()
            .filter(|c| &c.row == pivot_row)
            .filter_map(|c| c.pivot.as_ref().map(|p| (c.seed, p)))
            .collect();
        if !runs.is_empty() {
            let avgs: Vec<(f64, f64)> = runs
                .iter()
                .map(|(_, p)| average(&p.iter().collect::<Vec<_>>()))
                .collect();
            report.pivot = Some(PivotSummary {
                row: pivot_row.clone(),
                seeds: runs.iter().map(|r| r.0).collect(),
                zero_shot_bleu: mean(avgs.iter().map(|a| a.0)),
                zero_shot_off_target: mean(avgs.iter().map(|a| a.1)),
            });
        }
    }

    let resamples = spec.analysis.bootstrap_resamples;
    let bseed = spec.analysis.bootstrap_seed;
    let refs_of = |d: &DirectionResult| -> Vec<Vec<String>> {
        corpus
            .test
            .iter()
            .filter(|p| p.src_lang == d.src && p.tgt_lang == d.tgt)
            .map(|p| p.tgt.clone())
            .collect()
    };
    let mut significance = Vec::new();
    let mut p_values = Vec::new();
    for row in &report.rows {
        let Some(base) = report.baseline_of(row) else {
            continue;
        };
        let common: Vec<(&CellResult, &CellResult)> = report
            .seeds
            .iter()
            .filter_map(|&s| Some((report.cell(&row.id, s)?, report.cell(&base.id, s)?)))
            .collect();
        if common.is_empty() {
            continue;
        }
        for split in [DirectionClass::ZeroShot, DirectionClass::Supervised] {
            let (mut ha, mut hb, mut refs) = (Vec::new(), Vec::new(), Vec::new());
            for (a, b) in &common {
                for (da, db) in a.class(split).into_iter().zip(b.class(split)) {
                    ha.extend(da.hypotheses.iter().cloned());
                    hb.extend(db.hypotheses.iter().cloned());
                    refs.extend(refs_of(da));
                }
            }
            if refs.is_empty() {
                continue;
            }
            let n = common.len() as f64;
            let pick = |c: &CellResult| match split {
                DirectionClass::ZeroShot => c.zero_shot_bleu,
                DirectionClass::Supervised => c.supervised_bleu,
            };
            significance.push(Significance {
                row: row.id.clone(),
                baseline: base.id.clone(),
                split,
                row_bleu: common.iter().map(|(a, _)| pick(a)).sum::<f64>() / n,
                baseline_bleu: common.iter().map(|(_, b)| pick(b)).sum::<f64>() / n,
                p_row_better: paired_bootstrap(&ha, &hb, &refs, resamples, bseed)?,
                p_baseline_better: paired_bootstrap(&hb, &ha, &refs, resamples, bseed)?,
            });
        }
        for (a, b) in &common {
            for (i, (da, db)) in a.directions.iter().zip(&b.directions).enumerate() {
                let refs = refs_of(da);
                let p = paired_bootstrap(&da.hypotheses, &db.hypotheses, &refs, resamples, bseed)?;
                p_values.push((row.id.clone(), a.seed, i, p));
            }
        }
    }
    report.significance = significance;
    report.direction_p_values = p_values;
    Ok(report)
}

/// Progress callback for [`run_matrix`].
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

#[derive(Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Concurrent cells; `0` is treated as one.
    pub jobs: usize,
    pub progress: Option<Progress<'a>>,
}

#[derive(Clone, Debug)]
pub struct MatrixRun {
    pub report: ExperimentReport,
    pub trained: usize,
    pub cached: usize,
}

impl MatrixRun {
    pub fn failed(&self) -> bool {
        !self.report.failures.is_empty()
    }
}

enum Outcome {
    Cached(CellResult),
    Trained(CellResult),
    Failed(String),
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "cell panicked".into())
}

/// Runs every (row, seed) cell with up to `jobs` concurrent workers, then
/// assembles the report and writes it with [`crate::report::render_report`].
/// Failed cells are recorded in the report and do not stop the others.
pub fn run_matrix(spec: &ExperimentSpec, options: RunOptions<'_>) -> Result<MatrixRun> {
    spec.validate()?;
    fs::create_dir_all(&spec.out)?;
    let corpus = prepare_corpus(&spec.corpus, &spec.out.join(CORPUS_DIR))?;
    let cells: Vec<(&SettingRow, u64)> = spec
        .rows
        .iter()
        .flat_map(|r| spec.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let say = |m: &str| {
        if let Some(p) = options.progress {
            p(m)
        }
    };
    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<Option<Outcome>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = options.jobs.max(1).min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(row, seed)) = cells.get(i) else {
                    break;
                };
                let dir = spec.cell_dir(row, seed);
                let checksum = spec.cell_checksum(row, seed);
                let outcome = match load_cached_cell(&dir, &checksum) {
                    Some(c) => {
                        say(&format!("cell {} seed {seed}: cached", row.id));
                        Outcome::Cached(c)
                    }
                    None => {
                        say(&format!("cell {} seed {seed}: running", row.id));
                        let run = panic::catch_unwind(AssertUnwindSafe(|| {
                            run_cell(spec, &corpus, row, seed, &dir)
                        }));
                        match run {
                            Ok(Ok(c)) => {
                                say(&format!(
                                    "cell {} seed {seed}: done, supervised {:.2} zero-shot {:.2}",
                                    row.id, c.supervised_bleu, c.zero_shot_bleu
                                ));
                                Outcome::Trained(c)
                            }
                            Ok(Err(e)) => Outcome::Failed(e.to_string()),
                            Err(p) => Outcome::Failed(panic_message(p)),
                        }
                    }
                };
                if let Outcome::Failed(e) = &outcome {
                    say(&format!("cell {} seed {seed}: failed: {e}", row.id));
                }
                outcomes
                    .lock()
                    .expect("no worker panics while holding the lock")[i] = Some(outcome);
            });
        }
    });

    let (mut done, mut failures) = (Vec::new(), Vec::new());
    let (mut trained, mut cached) = (0, 0);
    for ((row, seed), o) in cells
        .iter()
        .zip(outcomes.into_inner().expect("workers joined"))
    {
        match o.expect("every cell visited") {
            Outcome::Cached(c) => {
                cached += 1;
                done.push(c)
            }
            Outcome::Trained(c) => {
                trained += 1;
                done.push(c)
            }
            Outcome::Failed(error) => failures.push(CellFailure {
                row: row.id.clone(),
                seed: *seed,
                error,
            }),
        }
    }
    let report = assemble_report(spec, &corpus, done, failures)?;
    report.check_consistency()?;
    crate::report::write_report(&report, &spec.out)?;
    Ok(MatrixRun {
        report,
        trained,
        cached,
    })
}
