use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r##"
seeds = [1]

[[rows]]
id = "#1"
norm_placement = "PreNorm"
tag_scheme = "SEncTDec"
residual = true

[[rows]]
id = "#2"
norm_placement = "PostNorm"
tag_scheme = "SEncTDec"
residual = true

[corpus]
seed = 4
languages = 3
concepts = 16
train_pairs_per_direction = 20
valid_per_direction = 6
test_per_direction = 12
min_len = 3
max_len = 5

[model]
encoder_layers = 2
decoder_layers = 1
d_model = 16
heads = 2
d_ffn = 32

[training]
epochs = 1
max_tokens = 128
lr = 1e-3
warmup = 10

[analysis]
svcca_sentences = 12
bootstrap_resamples = 100
"##;

fn zeronorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zeronorm"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unravel_prints_the_census() {
    let o = zeronorm(&["unravel"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("total_paths 4096\n"));
    assert!(text.contains("shallow_paths 1\n"));
    assert!(text.lines().any(|l| l == "LN_final"));

    let o = zeronorm(&["unravel", "--layers", "1", "--placement", "swap"]);
    let text = stdout(&o);
    assert!(text.contains("total_paths 4\n"));
    assert!(text.lines().any(|l| l == "LN_final∘LN∘FFN1∘LN∘SA1"));

    let o = zeronorm(&["unravel", "--ablate", "4"]);
    assert!(stdout(&o).contains("shallow_paths 0\n"));
}

#[test]
fn configuration_errors_exit_with_one() {
    assert_eq!(
        zeronorm(&["unravel", "--placement", "post"]).status.code(),
        Some(1)
    );
    assert_eq!(zeronorm(&["no-such-command"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeds = []\n");
    assert_eq!(
        zeronorm(&["--config", &cfg, "experiment"]).status.code(),
        Some(1)
    );
    let cfg = write_config(dir.path(), "[model]\nwidth = 3\n");
    assert_eq!(
        zeronorm(&["--config", &cfg, "unravel"]).status.code(),
        Some(1)
    );
    assert_eq!(zeronorm(&["--help"]).status.code(), Some(0));
}

#[test]
fn single_model_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let (data_s, model_s) = (data.to_str().unwrap(), model.to_str().unwrap());

    let o = zeronorm(&["--config", &cfg, "--out", data_s, "gen-data"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        fs::read_to_string(data.join("test.tsv"))
            .unwrap()
            .lines()
            .count(),
        6 * 12
    );

    let o = zeronorm(&["--config", &cfg, "--out", model_s, "--seed", "3", "train"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let line = stdout(&o);
    assert!(line.starts_with("{\"epoch\":1,"));
    assert!(model.join("best.ckpt").exists());

    let ckpt = model.join("best.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    let o = zeronorm(&[
        "--config",
        &cfg,
        "evaluate",
        "--checkpoint",
        ckpt_s,
        "--data",
        data_s,
        "--baseline",
        ckpt_s,
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("src,tgt,zero_shot,bleu,off_target,p_value")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    // A model compared with itself is never strictly better.
    assert!(rows.iter().all(|r| r.ends_with(",1.0000")));

    let o = zeronorm(&["--config", &cfg, "probe-llr", "--checkpoint", ckpt_s]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = stdout(&o);
    assert!(csv.starts_with("layer,kind,split,accuracy\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 2);

    let o = zeronorm(&["--config", &cfg, "probe-svcca", "--checkpoint", ckpt_s]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(stdout(&o).lines().count(), 1 + 2);

    let input = dir.path().join("in.txt");
    fs::write(&input, "en01 en02 en03\nen04 en05\n").unwrap();
    let o = zeronorm(&[
        "--config",
        &cfg,
        "translate",
        "--checkpoint",
        ckpt_s,
        "--src",
        "en",
        "--tgt",
        "aa",
        "--input",
        input.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(stdout(&o).lines().count(), 2);

    let o = zeronorm(&[
        "--config",
        &cfg,
        "translate",
        "--checkpoint",
        ckpt_s,
        "--src",
        "en",
        "--tgt",
        "zz",
    ]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn experiment_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{TINY}\n[decode]\nbeam = 2\n");
    let body = body.replace("[analysis]\n", "[analysis]\npivot_row = \"#2\"\n");
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = zeronorm(&[
        "--config",
        &cfg,
        "--out",
        out_s,
        "--jobs",
        "2",
        "experiment",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).starts_with("| # | Layer Norm |"));
    let summary = fs::read(out.join("summary.csv")).unwrap();
    fs::remove_file(out.join("summary.csv")).unwrap();
    let o = zeronorm(&["--out", out_s, "report"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), summary);

    // A cell whose directory cannot be created fails; the rest still run.
    let other = dir.path().join("blocked");
    fs::create_dir_all(other.join("cells")).unwrap();
    fs::write(other.join("cells/1-s1"), "").unwrap();
    let o = zeronorm(&[
        "--config",
        &cfg,
        "--out",
        other.to_str().unwrap(),
        "experiment",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(other.join("cells/2-s1/cell.json").exists());
}
