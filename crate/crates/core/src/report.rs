//! Renders an [`ExperimentReport`] as a markdown table, CSV files and SVG
//! line plots. Every output is a pure function of the report, formatted
//! with fixed precision, so identical reports give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::eval::DirectionResult;
use crate::experiment::{ExperimentReport, SettingRow};
use crate::model::NormPlacement;
use crate::probes::{DirectionClass, LabelKind, LlrRow};
use crate::{Error, Result};

/// Bootstrap p-value below which a BLEU difference is marked.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderedReport {
    pub markdown: String,
    /// `(file name, contents)`.
    pub csv: Vec<(String, String)>,
    pub svg: Vec<(String, String)>,
}

fn num(x: f64, places: usize) -> String {
    if x.is_finite() {
        format!("{x:.places$}")
    } else {
        "nan".into()
    }
}

/// PreNorm rows and the PostNorm rows they are compared against.
fn norm_pairs(report: &ExperimentReport) -> Vec<(&SettingRow, &SettingRow)> {
    report
        .rows
        .iter()
        .filter(|r| r.norm_placement == NormPlacement::PreNorm)
        .filter_map(|r| Some((r, report.baseline_of(r)?)))
        .collect()
}

struct Marks {
    bleu: bool,
    off_target: bool,
}

fn zero_shot_marks(report: &ExperimentReport, row: &SettingRow) -> Marks {
    let mut marks = Marks {
        bleu: false,
        off_target: false,
    };
    for (pre, post) in norm_pairs(report) {
        let (me, other) = if pre.id == row.id {
            (pre, post)
        } else if post.id == row.id {
            (post, pre)
        } else {
            continue;
        };
        if let Some(s) = report.significance.iter().find(|s| {
            s.row == pre.id && s.baseline == post.id && s.split == DirectionClass::ZeroShot
        }) {
            let p = if me.id == pre.id {
                s.p_row_better
            } else {
                s.p_baseline_better
            };
            marks.bleu |= p < SIGNIFICANCE_LEVEL;
        }
        if let (Some(a), Some(b)) = (report.summary(&me.id), report.summary(&other.id)) {
            marks.off_target |= a.zero_shot_off_target < b.zero_shot_off_target;
        }
    }
    marks
}

fn bold(s: String, on: bool) -> String {
    if on {
        format!("**{s}**")
    } else {
        s
    }
}

/// The results table: one line per setting, zero-shot BLEU with off-target
/// rate in brackets, then supervised BLEU. Significantly better zero-shot
/// BLEU and the lower off-target rate of each PreNorm/PostNorm pair are bold.
pub fn markdown_table(report: &ExperimentReport) -> String {
    let mut s = String::new();
    s.push_str("| # | Layer Norm | Language Tag | Res. | Zero-shot | Supervised |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    if let Some(p) = &report.pivot {
        let _ = writeln!(
            s,
            "| 0 | *Pivot* ({}) | | | {} ({}%) | - |",
            p.row,
            num(p.zero_shot_bleu, 1),
            num(100.0 * p.zero_shot_off_target, 2)
        );
    }
    for row in &report.rows {
        let id = row.id.trim_start_matches('#');
        let Some(sum) = report.summary(&row.id) else {
            let _ = writeln!(
                s,
                "| {id} | {} | {} | {} | failed | failed |",
                row.norm_label(),
                row.tag_scheme,
                row.residual_label()
            );
            continue;
        };
        let marks = zero_shot_marks(report, row);
        let _ = writeln!(
            s,
            "| {id} | {} | {} | {} | {} ({}) | {} |",
            row.norm_label(),
            row.tag_scheme,
            row.residual_label(),
            bold(num(sum.zero_shot_bleu, 1), marks.bleu),
            bold(
                format!("{}%", num(100.0 * sum.zero_shot_off_target, 2)),
                marks.off_target
            ),
            num(sum.supervised_bleu, 1)
        );
    }
    let _ = writeln!(
        s,
        "\nMean of seeds {}. Bold: zero-shot BLEU significantly higher than the paired \
         PreNorm/PostNorm row (paired bootstrap p < {SIGNIFICANCE_LEVEL}) and the lower off-target rate of the pair.",
        report
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    );
    if !report.failures.is_empty() {
        s.push_str("\nFailed cells:\n");
        for f in &report.failures {
            let _ = writeln!(s, "- {} seed {}: {}", f.row, f.seed, f.error);
        }
    }
    s
}

/// Per-direction CSV with an optional p-value column entry per direction.
pub fn directions_csv(results: &[DirectionResult], p_values: &[Option<f64>]) -> String {
    let mut s = String::from("src,tgt,zero_shot,bleu,off_target,p_value\n");
    for (i, r) in results.iter().enumerate() {
        let p = p_values
            .get(i)
            .copied()
            .flatten()
            .map(|p| num(p, 4))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{p}",
            r.src,
            r.tgt,
            r.is_zero_shot,
            num(r.bleu, 4),
            num(r.off_target_rate, 6)
        );
    }
    s
}

fn summary_csv(report: &ExperimentReport) -> String {
    let mut s = String::from(
        "row,norm,tag,residual,seeds,zero_shot_bleu,zero_shot_off_target,supervised_bleu,supervised_off_target\n",
    );
    if let Some(p) = &report.pivot {
        let _ = writeln!(
            s,
            "pivot,{},,,{},{},{},,",
            p.row,
            p.seeds.len(),
            num(p.zero_shot_bleu, 4),
            num(p.zero_shot_off_target, 6)
        );
    }
    for sum in &report.summaries {
        let r = &sum.row;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.id,
            r.norm_label(),
            r.tag_scheme,
            r.residual_label(),
            sum.seeds.len(),
            num(sum.zero_shot_bleu, 4),
            num(sum.zero_shot_off_target, 6),
            num(sum.supervised_bleu, 4),
            num(sum.supervised_off_target, 6)
        );
    }
    s
}

fn cells_csv(report: &ExperimentReport) -> String {
    let mut s = String::from(
        "row,seed,epochs_run,best_epoch,best_valid_loss,supervised_bleu,supervised_off_target,zero_shot_bleu,zero_shot_off_target\n",
    );
    for c in &report.cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.row,
            c.seed,
            c.epochs_run,
            c.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            c.best_valid_loss.map(|l| num(l, 6)).unwrap_or_default(),
            num(c.supervised_bleu, 4),
            num(c.supervised_off_target, 6),
            num(c.zero_shot_bleu, 4),
            num(c.zero_shot_off_target, 6)
        );
    }
    s
}

fn all_directions_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("row,seed,src,tgt,zero_shot,bleu,off_target,p_value\n");
    for c in &report.cells {
        for (i, d) in c.directions.iter().enumerate() {
            let p = report
                .direction_p_values
                .iter()
                .find(|(r, seed, j, _)| r == &c.row && *seed == c.seed && *j == i)
                .map(|x| num(x.3, 4))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{p}",
                c.row,
                c.seed,
                d.src,
                d.tgt,
                d.is_zero_shot,
                num(d.bleu, 4),
                num(d.off_target_rate, 6)
            );
        }
        if let Some(pivot) = &c.pivot {
            for d in pivot {
                let _ = writeln!(
                    s,
                    "pivot:{},{},{},{},{},{},{},",
                    c.row,
                    c.seed,
                    d.src,
                    d.tgt,
                    d.is_zero_shot,
                    num(d.bleu, 4),
                    num(d.off_target_rate, 6)
                );
            }
        }
    }
    s
}

fn llr_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("row,layer,kind,split,accuracy\n");
    for sum in &report.summaries {
        for r in sum.llr.iter().flatten() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                sum.row.id,
                r.layer,
                r.kind,
                r.split,
                num(r.accuracy, 6)
            );
        }
    }
    s
}

fn svcca_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("row,layer,svcca\n");
    for sum in &report.summaries {
        for (l, v) in sum.svcca.iter().flatten().enumerate() {
            let _ = writeln!(s, "{},{},{}", sum.row.id, l + 1, num(*v, 6));
        }
    }
    s
}

fn significance_csv(report: &ExperimentReport) -> String {
    let mut s =
        String::from("row,baseline,split,row_bleu,baseline_bleu,p_row_better,p_baseline_better\n");
    for x in &report.significance {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            x.row,
            x.baseline,
            x.split,
            num(x.row_bleu, 4),
            num(x.baseline_bleu, 4),
            num(x.p_row_better, 4),
            num(x.p_baseline_better, 4)
        );
    }
    s
}

/// A named polyline for [`line_plot`].
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
    pub color: &'static str,
    pub dashed: bool,
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 130.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

/// A static SVG line chart over categorical x positions and y in `[0, 1]`.
pub fn line_plot(title: &str, x_labels: &[String], series: &[Series]) -> String {
    let inner_w = PLOT_W - MARGIN_L - MARGIN_R;
    let inner_h = PLOT_H - MARGIN_T - MARGIN_B;
    let n = x_labels.len().max(1);
    let x_at = |i: usize| {
        if n == 1 {
            MARGIN_L + inner_w / 2.0
        } else {
            MARGIN_L + inner_w * i as f64 / (n - 1) as f64
        }
    };
    let y_at = |v: f64| MARGIN_T + inner_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{PLOT_W}" height="{PLOT_H}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_L + inner_w / 2.0,
        escape(title)
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = y_at(v);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_L:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            MARGIN_L + inner_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            MARGIN_L - 8.0,
            y + 4.0
        );
    }
    let base = MARGIN_T + inner_h;
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_L:.1}" y1="{base:.1}" x2="{:.1}" y2="{base:.1}" stroke="black"/>"#,
        MARGIN_L + inner_w
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_L:.1}" y1="{MARGIN_T:.1}" x2="{MARGIN_L:.1}" y2="{base:.1}" stroke="black"/>"#
    );
    for (i, label) in x_labels.iter().enumerate() {
        let x = x_at(i);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{base:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#,
            base + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text class="xtick" x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            base + 20.0,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">accuracy</text>"#,
        MARGIN_T + inner_h / 2.0,
        MARGIN_T + inner_h / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let points: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.1},{:.1}", x_at(i), y_at(v)))
            .collect();
        let dash = if ser.dashed {
            r#" stroke-dasharray="6 4""#
        } else {
            ""
        };
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2"{dash} points="{}"/>"#,
            ser.color,
            points.join(" ")
        );
        let ly = MARGIN_T + 10.0 + 20.0 * k as f64;
        let lx = MARGIN_L + inner_w + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"{dash}/>"#,
            lx + 25.0,
            ser.color
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 32.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn curve(rows: &[LlrRow], layers: usize, kind: LabelKind, split: DirectionClass) -> Vec<f64> {
    (1..=layers)
        .map(|l| {
            rows.iter()
                .find(|r| r.layer == l && r.kind == kind && r.split == split)
                .map_or(f64::NAN, |r| r.accuracy)
        })
        .collect()
}

/// Layer tick labels `L1..L{n}`, encoder layers first.
pub fn layer_labels(layers: usize) -> Vec<String> {
    (1..=layers).map(|l| format!("L{l}")).collect()
}

fn llr_plots(report: &ExperimentReport) -> Vec<(String, String)> {
    let layers = report.encoder_layers + report.decoder_layers;
    let labels = layer_labels(layers);
    let mut out = Vec::new();
    for (pre, post) in norm_pairs(report) {
        let (Some(a), Some(b)) = (report.summary(&pre.id), report.summary(&post.id)) else {
            continue;
        };
        let (Some(la), Some(lb)) = (&a.llr, &b.llr) else {
            continue;
        };
        for split in [DirectionClass::Supervised, DirectionClass::ZeroShot] {
            let series = vec![
                Series {
                    name: "Pre-Src".into(),
                    values: curve(la, layers, LabelKind::Source, split),
                    color: "#1f77b4",
                    dashed: true,
                },
                Series {
                    name: "Pre-Tgt".into(),
                    values: curve(la, layers, LabelKind::Target, split),
                    color: "#1f77b4",
                    dashed: false,
                },
                Series {
                    name: "Post-Src".into(),
                    values: curve(lb, layers, LabelKind::Source, split),
                    color: "#d62728",
                    dashed: true,
                },
                Series {
                    name: "Post-Tgt".into(),
                    values: curve(lb, layers, LabelKind::Target, split),
                    color: "#d62728",
                    dashed: false,
                },
            ];
            if series.iter().all(|s| s.values.iter().all(|v| v.is_nan())) {
                continue;
            }
            let title = format!("LLR {} vs {} ({})", pre.id, post.id, split);
            let name = format!("llr_{}_vs_{}_{}.svg", pre.slug(), post.slug(), split);
            out.push((name, line_plot(&title, &labels, &series)));
        }
    }
    out
}

/// Renders every output of a report.
pub fn render_report(report: &ExperimentReport) -> Result<RenderedReport> {
    if report.seeds.is_empty() {
        return Err(Error::Config("report has no seeds".into()));
    }
    if report.rows.is_empty() {
        return Err(Error::Config("report has no setting rows".into()));
    }
    Ok(RenderedReport {
        markdown: markdown_table(report),
        csv: vec![
            ("summary.csv".into(), summary_csv(report)),
            ("cells.csv".into(), cells_csv(report)),
            ("directions.csv".into(), all_directions_csv(report)),
            ("llr.csv".into(), llr_csv(report)),
            ("svcca.csv".into(), svcca_csv(report)),
            ("significance.csv".into(), significance_csv(report)),
        ],
        svg: llr_plots(report),
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.md";

/// Writes `report.json`, the table, the CSVs and `plots/*.svg` under `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let rendered = render_report(report)?;
    fs::create_dir_all(dir.join("plots"))?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: &[u8]| -> Result<()> {
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(dir.join(REPORT_FILE), &serde_json::to_vec_pretty(report)?)?;
    put(dir.join(TABLE_FILE), rendered.markdown.as_bytes())?;
    for (name, body) in &rendered.csv {
        put(dir.join(name), body.as_bytes())?;
    }
    for (name, body) in &rendered.svg {
        put(dir.join("plots").join(name), body.as_bytes())?;
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{default_rows, CellResult, CellTimings, RowSummary, Significance};

    fn dr(src: &str, tgt: &str, bleu: f64, off: f64) -> DirectionResult {
        DirectionResult {
            src: src.into(),
            tgt: tgt.into(),
            bleu,
            off_target_rate: off,
            is_zero_shot: src != "en" && tgt != "en",
            hypotheses: vec![],
        }
    }

    fn cell(row: &str, seed: u64, zs: f64, off: f64, sup: f64) -> CellResult {
        CellResult {
            row: row.into(),
            seed,
            input_checksum: String::new(),
            epochs_run: 1,
            best_epoch: Some(1),
            best_valid_loss: Some(1.0),
            directions: vec![dr("en", "aa", sup, 0.0), dr("aa", "bb", zs, off)],
            supervised_bleu: sup,
            supervised_off_target: 0.0,
            zero_shot_bleu: zs,
            zero_shot_off_target: off,
            llr: None,
            svcca: None,
            pivot: None,
            timings: CellTimings::default(),
        }
    }

    fn toy_report(p_post: f64) -> ExperimentReport {
        let rows = default_rows()[..2].to_vec();
        let cells = vec![
            cell("#1", 1, 10.0, 0.4, 33.0),
            cell("#2", 1, 16.0, 0.1, 34.0),
        ];
        let summaries = rows
            .iter()
            .zip(&cells)
            .map(|(r, c)| RowSummary {
                row: r.clone(),
                seeds: vec![1],
                supervised_bleu: c.supervised_bleu,
                supervised_off_target: 0.0,
                zero_shot_bleu: c.zero_shot_bleu,
                zero_shot_off_target: c.zero_shot_off_target,
                llr: Some(vec![]),
                svcca: None,
            })
            .collect();
        ExperimentReport {
            rows,
            seeds: vec![1],
            languages: vec![],
            encoder_layers: 6,
            decoder_layers: 6,
            cells,
            summaries,
            pivot: None,
            significance: vec![Significance {
                row: "#1".into(),
                baseline: "#2".into(),
                split: DirectionClass::ZeroShot,
                row_bleu: 10.0,
                baseline_bleu: 16.0,
                p_row_better: 1.0 - p_post,
                p_baseline_better: p_post,
            }],
            direction_p_values: vec![],
            failures: vec![],
        }
    }

    #[test]
    fn bold_follows_significance() {
        let sig = markdown_table(&toy_report(0.01));
        assert!(sig.contains("| **16.0** (**10.00%**) |"), "{sig}");
        assert!(sig.contains("| 10.0 (40.00%) |"), "{sig}");
        let not_sig = markdown_table(&toy_report(0.2));
        assert!(not_sig.contains("| 16.0 (**10.00%**) |"), "{not_sig}");
        assert!(!not_sig.contains("**16.0**"));
    }

    #[test]
    fn report_checks_its_own_averages() {
        let mut r = toy_report(0.5);
        r.check_consistency().unwrap();
        r.summaries[0].zero_shot_bleu += 1.0;
        assert!(r.check_consistency().is_err());
    }

    #[test]
    fn empty_seeds_is_config_error() {
        let mut r = toy_report(0.5);
        r.seeds.clear();
        assert!(matches!(render_report(&r), Err(Error::Config(_))));
    }

    #[test]
    fn plot_has_layer_ticks() {
        let svg = line_plot(
            "t",
            &layer_labels(12),
            &[Series {
                name: "a".into(),
                values: vec![0.5; 12],
                color: "black",
                dashed: false,
            }],
        );
        let ticks: Vec<&str> = svg
            .lines()
            .filter(|l| l.contains("class=\"xtick\""))
            .map(|l| &l[l.find('>').unwrap() + 1..l.rfind('<').unwrap()])
            .collect();
        assert_eq!(ticks, layer_labels(12));
        assert_eq!(ticks[0], "L1");
        assert_eq!(ticks[11], "L12");
    }

    #[test]
    fn direction_csv_format() {
        let csv = directions_csv(
            &[dr("en", "aa", 50.0, 0.0), dr("aa", "bb", 12.5, 0.25)],
            &[None, Some(0.03)],
        );
        assert_eq!(
            csv,
            "src,tgt,zero_shot,bleu,off_target,p_value\nen,aa,false,50.0000,0.000000,\naa,bb,true,12.5000,0.250000,0.0300\n"
        );
    }
}
