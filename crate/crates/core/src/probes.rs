//! Analysis instruments: layer-wise language recognition (LLR), SVCCA and the
//! unraveled-view path census.

use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zeronorm_tensor::{Adam, AdamConfig, Graph, LrSchedule, Tensor};

use crate::corpus::{apply_tags, Direction, LanguageSet, SentencePair, Vocabulary};
use crate::model::{ModelConfig, NormPlacement, TokenBatch, Transformer};
use crate::{Error, Result};

/// Hidden states of one side of the model: `states[l]` is a row-major
/// `[rows, d]` matrix for layer `l`, and row `i` belongs to `rows[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SideTrace {
    pub states: Vec<Vec<f64>>,
    pub rows: Vec<RowLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowLabel {
    /// Index into [`HiddenStateTrace::sentences`].
    pub sentence: usize,
    pub src_lang: usize,
    pub tgt_lang: usize,
    /// Index into [`HiddenStateTrace::directions`].
    pub direction: usize,
}

/// Per-layer token states of a set of sentences. Encoder rows cover every
/// source token (the tag position excluded); decoder rows cover every
/// position the model generated greedily.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateTrace {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub languages: Vec<String>,
    pub directions: Vec<Direction>,
    pub sentences: usize,
    pub encoder: SideTrace,
    pub decoder: SideTrace,
}

impl HiddenStateTrace {
    pub fn total_layers(&self) -> usize {
        self.encoder_layers + self.decoder_layers
    }

    /// States and labels of 0-based layer `layer` over the whole stack.
    pub fn layer(&self, layer: usize) -> Result<(&[f64], &[RowLabel])> {
        if layer < self.encoder_layers {
            Ok((&self.encoder.states[layer], &self.encoder.rows))
        } else if layer < self.total_layers() {
            let l = layer - self.encoder_layers;
            Ok((&self.decoder.states[l], &self.decoder.rows))
        } else {
            Err(Error::Input(format!(
                "layer {layer} outside a {}-layer trace",
                self.total_layers()
            )))
        }
    }
}

fn pairs_for<'p>(
    pairs: &'p [SentencePair],
    directions: &[Direction],
) -> Result<Vec<(usize, &'p SentencePair)>> {
    let mut out = Vec::new();
    for (di, d) in directions.iter().enumerate() {
        let before = out.len();
        out.extend(
            pairs
                .iter()
                .filter(|p| &p.direction() == d)
                .map(|p| (di, p)),
        );
        if out.len() == before {
            return Err(Error::Input(format!(
                "direction {d} not present in the split"
            )));
        }
    }
    Ok(out)
}

/// Sentences processed per forward pass while tracing.
const TRACE_CHUNK: usize = 64;

/// Runs the model over `pairs` restricted to `directions` and records every
/// layer's token states. Decoder states come from greedy generation.
pub fn collect_traces(
    model: &Transformer,
    vocab: &Vocabulary,
    languages: &LanguageSet,
    pairs: &[SentencePair],
    directions: &[Direction],
    extra_len: usize,
) -> Result<HiddenStateTrace> {
    let cfg = model.config();
    let d = cfg.d_model;
    let selected = pairs_for(pairs, directions)?;
    let mut trace = HiddenStateTrace {
        d_model: d,
        encoder_layers: cfg.encoder_layers,
        decoder_layers: cfg.decoder_layers,
        languages: languages.ids(),
        directions: directions.to_vec(),
        sentences: selected.len(),
        encoder: SideTrace {
            states: vec![Vec::new(); cfg.encoder_layers],
            rows: Vec::new(),
        },
        decoder: SideTrace {
            states: vec![Vec::new(); cfg.decoder_layers],
            rows: Vec::new(),
        },
    };
    let lang_index = |id: &str| languages.index_of(id).expect("validated by apply_tags");
    for (chunk_no, chunk) in selected.chunks(TRACE_CHUNK).enumerate() {
        let mut sources = Vec::with_capacity(chunk.len());
        let mut starts = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for (i, &(di, p)) in chunk.iter().enumerate() {
            let tagged = apply_tags(
                &p.src,
                &p.src_lang,
                &p.tgt_lang,
                &[],
                cfg.tag_scheme,
                languages,
            )?;
            sources.push(vocab.encode(&tagged.encoder)?);
            starts.push(vocab.id(&tagged.decoder_start)?);
            labels.push(RowLabel {
                sentence: chunk_no * TRACE_CHUNK + i,
                src_lang: lang_index(&p.src_lang),
                tgt_lang: lang_index(&p.tgt_lang),
                direction: di,
            });
        }
        let max_len = sources.iter().map(Vec::len).max().unwrap_or(1) + extra_len;
        let generated = model.greedy(&sources, &starts, max_len)?;
        let inputs: Vec<Vec<usize>> = generated
            .iter()
            .zip(&starts)
            .map(|(gen, &s)| {
                let mut v = vec![s];
                v.extend_from_slice(&gen[..gen.len() - 1]);
                v
            })
            .collect();

        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let src = TokenBatch::from_sequences(&sources, Vocabulary::PAD_ID)?;
        let tgt = TokenBatch::from_sequences(&inputs, Vocabulary::PAD_ID)?;
        let enc = model.encode(&mut g, &b, &src)?;
        let mem = model.memory(&mut g, &b, &enc)?;
        let dec = model.decode(&mut g, &b, &mem, &tgt)?;
        for (l, &v) in enc.probe_states().iter().enumerate() {
            let t = g.value(v);
            for (r, s) in sources.iter().enumerate() {
                for pos in 1..s.len() {
                    trace.encoder.states[l].extend_from_slice(t.row(r * src.len + pos));
                }
            }
        }
        for (l, &v) in dec.probe_states().iter().enumerate() {
            let t = g.value(v);
            for (r, inp) in inputs.iter().enumerate() {
                for pos in 0..inp.len() {
                    trace.decoder.states[l].extend_from_slice(t.row(r * tgt.len + pos));
                }
            }
        }
        for (r, label) in labels.iter().enumerate() {
            trace
                .encoder
                .rows
                .extend(std::iter::repeat_n(*label, sources[r].len() - 1));
            trace
                .decoder
                .rows
                .extend(std::iter::repeat_n(*label, inputs[r].len()));
        }
    }
    Ok(trace)
}

/// A linear map from hidden states to language classes, with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub d: usize,
    pub classes: usize,
    /// `[d, classes]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<usize>> {
        if features.is_empty() || !features.len().is_multiple_of(self.d) {
            return Err(Error::Input(format!(
                "{} feature values for width {}",
                features.len(),
                self.d
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(
            vec![features.len() / self.d, self.d],
            features.to_vec(),
        )?);
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let y = g.matmul(x, w)?;
        let y = g.add_row(y, b)?;
        let v = g.value(y);
        Ok((0..v.rows())
            .map(|r| crate::model::argmax(v.row(r)))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Sentences per batch; every token of a sentence joins its batch.
    pub batch_sentences: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 3,
            lr: 1e-3,
            batch_sentences: 64,
            seed: 1,
        }
    }
}

/// Trains a zero-initialised linear probe with cross-entropy and Adam.
/// `groups[i]` is the sentence of row `i`; batches are whole sentences,
/// shuffled each epoch with the probe seed.
pub fn train_probe(
    features: &[f64],
    d: usize,
    labels: &[usize],
    groups: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<LinearProbe> {
    let rows = labels.len();
    if d == 0 || features.len() != rows * d || groups.len() != rows || rows == 0 {
        return Err(Error::Input(format!(
            "{} features, {rows} labels, {} groups at width {d}",
            features.len(),
            groups.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Config("probe labels contain a single class".into()));
    }
    let mut sentences: Vec<usize> = groups.to_vec();
    sentences.sort_unstable();
    sentences.dedup();
    let mut by_sentence: std::collections::HashMap<usize, Vec<usize>> = Default::default();
    for (i, &s) in groups.iter().enumerate() {
        by_sentence.entry(s).or_default().push(i);
    }

    let mut params = vec![Tensor::zeros(&[d, classes]), Tensor::zeros(&[classes])];
    let mut adam = Adam::new(AdamConfig::new(LrSchedule::Constant(config.lr)), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.epochs {
        sentences.shuffle(&mut rng);
        for batch in sentences.chunks(config.batch_sentences.max(1)) {
            let idx: Vec<usize> = batch
                .iter()
                .flat_map(|s| by_sentence[s].iter().copied())
                .collect();
            let mut x = Vec::with_capacity(idx.len() * d);
            for &i in &idx {
                x.extend_from_slice(&features[i * d..(i + 1) * d]);
            }
            let targets: Vec<Option<usize>> = idx.iter().map(|&i| Some(labels[i])).collect();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::from_vec(vec![idx.len(), d], x)?);
            let w = g.param(params[0].clone());
            let b = g.param(params[1].clone());
            let y = g.matmul(xv, w)?;
            let y = g.add_row(y, b)?;
            let loss = g.cross_entropy(y, &targets)?;
            let grads = g.backward(loss)?;
            adam.step(&mut params, &[grads.get(w), grads.get(b)])?;
        }
    }
    let bias = params.pop().expect("two params");
    let weight = params.pop().expect("two params");
    Ok(LinearProbe {
        d,
        classes,
        weight,
        bias,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Source,
    Target,
}

impl LabelKind {
    pub const ALL: [LabelKind; 2] = [LabelKind::Source, LabelKind::Target];

    fn of(self, r: &RowLabel) -> usize {
        match self {
            LabelKind::Source => r.src_lang,
            LabelKind::Target => r.tgt_lang,
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Source => "source",
            LabelKind::Target => "target",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionClass {
    Supervised,
    ZeroShot,
}

impl DirectionClass {
    pub fn of(d: &Direction) -> Self {
        if d.is_zero_shot() {
            DirectionClass::ZeroShot
        } else {
            DirectionClass::Supervised
        }
    }
}

impl fmt::Display for DirectionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectionClass::Supervised => "supervised",
            DirectionClass::ZeroShot => "zero_shot",
        })
    }
}

/// One probe per (layer, label kind).
#[derive(Clone, Debug, PartialEq)]
pub struct LlrProbes {
    pub layers: usize,
    pub probes: Vec<(usize, LabelKind, LinearProbe)>,
}

/// Trains the probe of one 0-based layer.
pub fn train_llr(
    trace: &HiddenStateTrace,
    layer: usize,
    kind: LabelKind,
    config: &ProbeConfig,
) -> Result<LinearProbe> {
    let (features, rows) = trace.layer(layer)?;
    let labels: Vec<usize> = rows.iter().map(|r| kind.of(r)).collect();
    let groups: Vec<usize> = rows.iter().map(|r| r.sentence).collect();
    train_probe(
        features,
        trace.d_model,
        &labels,
        &groups,
        trace.languages.len(),
        config,
    )
}

pub fn train_all_llr(trace: &HiddenStateTrace, config: &ProbeConfig) -> Result<LlrProbes> {
    let mut probes = Vec::new();
    for layer in 0..trace.total_layers() {
        for kind in LabelKind::ALL {
            probes.push((layer, kind, train_llr(trace, layer, kind, config)?));
        }
    }
    Ok(LlrProbes {
        layers: trace.total_layers(),
        probes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlrRow {
    /// 1-based layer: encoder first, then decoder.
    pub layer: usize,
    pub kind: LabelKind,
    pub split: DirectionClass,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LlrReport {
    pub layers: usize,
    pub rows: Vec<LlrRow>,
}

impl LlrReport {
    pub fn get(&self, layer: usize, kind: LabelKind, split: DirectionClass) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.kind == kind && r.split == split)
            .map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,split,accuracy\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.6}\n",
                r.layer, r.kind, r.split, r.accuracy
            ));
        }
        s
    }
}

/// Token-level top-1 accuracy of one probe, per direction of the trace.
pub fn probe_accuracy_by_direction(
    probe: &LinearProbe,
    trace: &HiddenStateTrace,
    layer: usize,
    kind: LabelKind,
) -> Result<Vec<Option<f64>>> {
    if probe.d != trace.d_model || probe.classes != trace.languages.len() {
        return Err(Error::Input(format!(
            "probe maps {} -> {}, trace has width {} and {} languages",
            probe.d,
            probe.classes,
            trace.d_model,
            trace.languages.len()
        )));
    }
    let (features, rows) = trace.layer(layer)?;
    let pred = probe.predict(features)?;
    let mut hit = vec![0usize; trace.directions.len()];
    let mut all = vec![0usize; trace.directions.len()];
    for (p, r) in pred.iter().zip(rows) {
        all[r.direction] += 1;
        hit[r.direction] += (*p == kind.of(r)) as usize;
    }
    Ok(hit
        .iter()
        .zip(&all)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect())
}

/// Evaluates every probe on a test trace: token accuracy per direction,
/// averaged over the directions of each class.
pub fn eval_llr(probes: &LlrProbes, trace: &HiddenStateTrace) -> Result<LlrReport> {
    if probes.layers != trace.total_layers() {
        return Err(Error::Input(format!(
            "probes cover {} layers, trace has {}",
            probes.layers,
            trace.total_layers()
        )));
    }
    let mut rows = Vec::new();
    for (layer, kind, probe) in &probes.probes {
        let acc = probe_accuracy_by_direction(probe, trace, *layer, *kind)?;
        for split in [DirectionClass::Supervised, DirectionClass::ZeroShot] {
            let vals: Vec<f64> = trace
                .directions
                .iter()
                .zip(&acc)
                .filter(|(d, _)| DirectionClass::of(d) == split)
                .filter_map(|(_, a)| *a)
                .collect();
            if !vals.is_empty() {
                rows.push(LlrRow {
                    layer: layer + 1,
                    kind: *kind,
                    split,
                    accuracy: vals.iter().sum::<f64>() / vals.len() as f64,
                });
            }
        }
    }
    Ok(LlrReport {
        layers: probes.layers,
        rows,
    })
}

/// Variance share kept by the SVD truncation step.
pub const SVCCA_KEEP: f64 = 0.99;

/// SVCCA between two views of the same `n` items.
///
/// Columns are centred, each view is truncated to the top singular
/// directions explaining `variance_keep` of its variance, and the result is
/// the mean canonical correlation between the truncated subspaces (the
/// singular values of `U_x^T U_y`).
pub fn svcca(x: &DMatrix<f64>, y: &DMatrix<f64>, variance_keep: f64) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Input(format!("{} vs {} rows", x.nrows(), y.nrows())));
    }
    if !(variance_keep > 0.0 && variance_keep <= 1.0) {
        return Err(Error::Config(format!(
            "variance_keep {variance_keep} outside (0, 1]"
        )));
    }
    let ux = reduced_basis(x, variance_keep)?;
    let uy = reduced_basis(y, variance_keep)?;
    let n = x.nrows();
    if n <= ux.ncols().max(uy.ncols()) {
        return Err(Error::Domain(format!(
            "{n} samples for subspaces of dimension {} and {}",
            ux.ncols(),
            uy.ncols()
        )));
    }
    let m = ux.transpose() * uy;
    let sv = m.singular_values();
    let k = sv.len();
    Ok(sv.iter().map(|v| v.clamp(0.0, 1.0)).sum::<f64>() / k as f64)
}

fn reduced_basis(x: &DMatrix<f64>, keep: f64) -> Result<DMatrix<f64>> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let svd = c.svd(true, false);
    let u = svd.u.expect("requested U");
    let s = svd.singular_values;
    // Sort directions by singular value; nalgebra does not promise an order.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let total: f64 = s.iter().map(|v| v * v).sum();
    let tol = s.iter().copied().fold(0.0, f64::max) * 1e-10 * x.nrows().max(x.ncols()) as f64;
    if total == 0.0 || s[order[0]] <= tol {
        return Err(Error::Domain("input has rank 0 after centring".into()));
    }
    let mut acc = 0.0;
    let mut kept = Vec::new();
    for &i in &order {
        if s[i] <= tol {
            break;
        }
        kept.push(i);
        acc += s[i] * s[i];
        if acc >= keep * total {
            break;
        }
    }
    Ok(DMatrix::from_fn(u.nrows(), kept.len(), |r, c| {
        u[(r, kept[c])]
    }))
}

/// Mean-pooled encoder states (tag position excluded), one row per sentence,
/// for each encoder layer.
pub fn pooled_encoder_states(
    model: &Transformer,
    vocab: &Vocabulary,
    languages: &LanguageSet,
    inputs: &[(Vec<String>, String, String)],
) -> Result<Vec<DMatrix<f64>>> {
    let cfg = model.config();
    let d = cfg.d_model;
    let mut pooled = vec![Vec::with_capacity(inputs.len() * d); cfg.encoder_layers];
    for chunk in inputs.chunks(TRACE_CHUNK) {
        let sources = chunk
            .iter()
            .map(|(t, s, g)| {
                let tagged = apply_tags(t, s, g, &[], cfg.tag_scheme, languages)?;
                vocab.encode(&tagged.encoder)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let src = TokenBatch::from_sequences(&sources, Vocabulary::PAD_ID)?;
        let enc = model.encode(&mut g, &b, &src)?;
        for (l, &v) in enc.probe_states().iter().enumerate() {
            let t = g.value(v);
            for (r, s) in sources.iter().enumerate() {
                let mut mean = vec![0.0; d];
                for pos in 1..s.len() {
                    for (m, x) in mean.iter_mut().zip(t.row(r * src.len + pos)) {
                        *m += x;
                    }
                }
                let n = (s.len() - 1).max(1) as f64;
                pooled[l].extend(mean.iter().map(|m| m / n));
            }
        }
    }
    Ok(pooled
        .into_iter()
        .map(|rows| DMatrix::from_row_slice(inputs.len(), d, &rows))
        .collect())
}

/// Encoder layer-wise SVCCA between the `en-xx` and `xx-en` directions,
/// averaged over every non-hub language. Both views encode the same test
/// sentences, once from English and once from `xx`.
pub fn encoder_svcca(
    model: &Transformer,
    vocab: &Vocabulary,
    languages: &LanguageSet,
    test: &[SentencePair],
    max_sentences: usize,
) -> Result<Vec<f64>> {
    let layers = model.config().encoder_layers;
    let mut sums = vec![0.0; layers];
    let mut count = 0;
    for lang in languages.iter().filter(|l| l.id != crate::corpus::HUB) {
        let pairs: Vec<&SentencePair> = test
            .iter()
            .filter(|p| p.src_lang == crate::corpus::HUB && p.tgt_lang == lang.id)
            .take(max_sentences)
            .collect();
        if pairs.is_empty() {
            return Err(Error::Input(format!("no en-{} test pairs", lang.id)));
        }
        let from_en: Vec<_> = pairs
            .iter()
            .map(|p| (p.src.clone(), p.src_lang.clone(), p.tgt_lang.clone()))
            .collect();
        let to_en: Vec<_> = pairs
            .iter()
            .map(|p| (p.tgt.clone(), p.tgt_lang.clone(), p.src_lang.clone()))
            .collect();
        let a = pooled_encoder_states(model, vocab, languages, &from_en)?;
        let b = pooled_encoder_states(model, vocab, languages, &to_en)?;
        for l in 0..layers {
            sums[l] += svcca(&a[l], &b[l], SVCCA_KEEP)?;
        }
        count += 1;
    }
    Ok(sums.iter().map(|s| s / count as f64).collect())
}

/// Sub-networks of the unraveled encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnravelCensus {
    pub placement: NormPlacement,
    pub residual_blocks: usize,
    pub free_blocks: usize,
    pub total_paths: u128,
    /// Paths that skip every sub-layer.
    pub shallow_paths: u128,
    /// One canonical operator string per path, outermost operator first.
    pub paths: Vec<String>,
}

impl UnravelCensus {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "placement {}\nresidual_blocks {}\nfree_blocks {}\ntotal_paths {}\nshallow_paths {}\n",
            self.placement,
            self.residual_blocks,
            self.free_blocks,
            self.total_paths,
            self.shallow_paths
        );
        for p in &self.paths {
            s.push_str(p);
            s.push('\n');
        }
        s
    }
}

/// Largest encoder for which individual path strings are listed.
pub const UNRAVEL_LIST_LIMIT: usize = 10;

/// Expands every residual sum of the encoder into its sub-network paths.
///
/// Each block contributes either the identity (only when it has a residual
/// connection) or its branch: `SA{l}∘LN` for PreNorm and `LN∘SA{l}` for
/// Swap-PreNorm (likewise for FFN). A path is the composition of its chosen
/// branches, wrapped in the stack-final norm when the encoder has one.
pub fn unravel(config: &ModelConfig) -> Result<UnravelCensus> {
    let branch = |op: &str| -> Result<String> {
        match config.norm_placement {
            NormPlacement::PostNorm => Err(Error::Unsupported(
                "PostNorm has no unraveled view: its LayerNorm sits after the residual \
                 addition, so the residual sums do not expand into independent paths"
                    .into(),
            )),
            NormPlacement::PreNorm | NormPlacement::PreNormWoEncLast => Ok(format!("{op}∘LN")),
            NormPlacement::SwapPreNorm => Ok(format!("LN∘{op}")),
        }
    };
    let mut blocks = Vec::new();
    for l in 1..=config.encoder_layers {
        blocks.push((
            branch(&format!("SA{l}"))?,
            config.ablate_sa_residual_at != Some(l),
        ));
        blocks.push((branch(&format!("FFN{l}"))?, true));
    }
    let free = blocks.iter().filter(|b| b.1).count();
    let total = 1u128 << free;
    let shallow = blocks.iter().all(|b| b.1) as u128;
    let final_norm = config.has_encoder_final_norm();
    let mut paths = Vec::new();
    if config.encoder_layers <= UNRAVEL_LIST_LIMIT {
        for mask in 0..total as u64 {
            let mut ops: Vec<&str> = Vec::new();
            let mut bit = 0;
            for (b, has_residual) in &blocks {
                let take = if *has_residual {
                    let t = mask >> bit & 1 == 1;
                    bit += 1;
                    t
                } else {
                    true
                };
                if take {
                    ops.push(b);
                }
            }
            ops.reverse();
            if final_norm {
                ops.insert(0, "LN_final");
            }
            paths.push(if ops.is_empty() {
                "id".to_string()
            } else {
                ops.join("∘")
            });
        }
    }
    Ok(UnravelCensus {
        placement: config.norm_placement,
        residual_blocks: blocks.len(),
        free_blocks: free,
        total_paths: total,
        shallow_paths: shallow,
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn svcca_invariances() {
        let x = noise(200, 8, 1);
        assert!((svcca(&x, &x, SVCCA_KEEP).unwrap() - 1.0).abs() < 1e-6);
        let shift = DMatrix::from_fn(200, 8, |_, c| c as f64 * 3.0 - 2.0);
        let y = &x * 2.5 + shift;
        assert!((svcca(&x, &y, SVCCA_KEEP).unwrap() - 1.0).abs() < 1e-6);
        let z = noise(200, 5, 2);
        let a = svcca(&x, &z, SVCCA_KEEP).unwrap();
        let b = svcca(&z, &x, SVCCA_KEEP).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn svcca_of_independent_noise_is_low() {
        for seed in 0..3 {
            let s = svcca(
                &noise(500, 20, seed),
                &noise(500, 20, seed + 100),
                SVCCA_KEEP,
            )
            .unwrap();
            assert!(s < 0.5, "{s}");
        }
    }

    #[test]
    fn svcca_rejects_constant_input() {
        let c = DMatrix::from_element(50, 3, 4.0);
        assert!(matches!(
            svcca(&c, &noise(50, 3, 0), SVCCA_KEEP),
            Err(Error::Domain(_))
        ));
    }

    fn one_hot(labels: &[usize], k: usize) -> Vec<f64> {
        labels
            .iter()
            .flat_map(|&l| (0..k).map(move |c| (c == l) as u8 as f64))
            .collect()
    }

    #[test]
    fn separable_features_are_learned() {
        let labels: Vec<usize> = (0..2000).map(|i| (i * 7 + i / 3) % 4).collect();
        let groups: Vec<usize> = (0..2000).map(|i| i / 5).collect();
        let x = one_hot(&labels, 4);
        let probe = train_probe(&x, 4, &labels, &groups, 4, &ProbeConfig::default()).unwrap();
        let pred = probe.predict(&x).unwrap();
        let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / 2000.0;
        assert!(acc >= 0.999, "{acc}");
    }

    #[test]
    fn probe_shape_and_errors() {
        let labels = vec![0, 1, 2, 3, 4, 0];
        let x = vec![0.5; 6 * 64];
        let p = train_probe(
            &x,
            64,
            &labels,
            &[0, 0, 1, 1, 2, 2],
            5,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(p.parameter_count(), 64 * 5 + 5);
        assert!(matches!(
            train_probe(&x, 64, &[1; 6], &[0; 6], 5, &ProbeConfig::default()),
            Err(Error::Config(_))
        ));
    }

    fn expand(blocks: &[(String, bool)]) -> Vec<Vec<String>> {
        // Multiply out prod_i (1 + B_i), with ablated blocks contributing B_i alone.
        let mut terms: Vec<Vec<String>> = vec![vec![]];
        for (b, residual) in blocks {
            let mut next = Vec::new();
            for t in &terms {
                if *residual {
                    next.push(t.clone());
                }
                let mut with = t.clone();
                with.push(b.clone());
                next.push(with);
            }
            terms = next;
        }
        terms
    }

    #[test]
    fn unravel_matches_symbolic_expansion() {
        for layers in 1..=3 {
            for ablate in [None, Some(1), Some(layers)] {
                for placement in [NormPlacement::PreNorm, NormPlacement::SwapPreNorm] {
                    let cfg = ModelConfig {
                        encoder_layers: layers,
                        norm_placement: placement,
                        ablate_sa_residual_at: ablate,
                        vocab_size: 10,
                        ..ModelConfig::default()
                    };
                    let census = unravel(&cfg).unwrap();
                    let wrap = |op: String| match placement {
                        NormPlacement::SwapPreNorm => format!("LN∘{op}"),
                        _ => format!("{op}∘LN"),
                    };
                    let blocks: Vec<(String, bool)> = (1..=layers)
                        .flat_map(|l| {
                            [
                                (wrap(format!("SA{l}")), ablate != Some(l)),
                                (wrap(format!("FFN{l}")), true),
                            ]
                        })
                        .collect();
                    let mut expect: Vec<String> = expand(&blocks)
                        .into_iter()
                        .map(|mut t| {
                            t.reverse();
                            t.insert(0, "LN_final".into());
                            t.join("∘")
                        })
                        .collect();
                    let mut got = census.paths.clone();
                    expect.sort();
                    got.sort();
                    assert_eq!(got, expect);
                    assert_eq!(census.total_paths as usize, expect.len());
                    let shallow = expect.iter().filter(|p| p.as_str() == "LN_final").count();
                    assert_eq!(census.shallow_paths as usize, shallow);
                }
            }
        }
    }

    #[test]
    fn unravel_counts() {
        let base = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        let one = unravel(&ModelConfig {
            encoder_layers: 1,
            ..base.clone()
        })
        .unwrap();
        assert_eq!(one.total_paths, 4);
        let six = unravel(&base).unwrap();
        assert_eq!((six.total_paths, six.shallow_paths), (4096, 1));
        let ablated = unravel(&ModelConfig {
            ablate_sa_residual_at: Some(4),
            ..base.clone()
        })
        .unwrap();
        assert_eq!((ablated.total_paths, ablated.shallow_paths), (2048, 0));
        let post = unravel(&ModelConfig {
            norm_placement: NormPlacement::PostNorm,
            ..base
        });
        assert!(matches!(post, Err(Error::Unsupported(_))));
    }
}
