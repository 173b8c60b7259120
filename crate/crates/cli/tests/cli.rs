//! End-to-end runs of the compiled binary: every subcommand, the exit-code
//! contract, config precedence, and deterministic re-runs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const ATTR_RULES: &str = "\
pred likecat/1 latent
pred tawny/1 latent
pred spot/1 latent
pred horselike/1 latent
pred white_black/1 latent
pred stripe/1 latent
pred leopard/1
pred tiger/1
pred zebra/1
R1: likecat(x) & tawny(x) & spot(x) => leopard(x)
R2: likecat(x) & tawny(x) & stripe(x) => tiger(x)
R3: horselike(x) & white_black(x) & stripe(x) => zebra(x)
";

const QUICK_CFG: &str = "\
em_rounds = 2
e_passes = 2
m_steps = 2
batch = 8
hidden_dim = 8
feature_dim = 4
";

fn gbpgr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbpgr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gbpgr(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn code(args: &[&str]) -> i32 {
    gbpgr(args).status.code().expect("exit code")
}

fn p(path: &Path) -> String {
    path.to_str().expect("utf8 path").to_string()
}

/// Writes the shared attribute fixture and returns (rules, config) paths.
fn fixture(dir: &Path) -> (String, String) {
    let rules = dir.join("rules.txt");
    let cfg = dir.join("quick.cfg");
    fs::write(&rules, ATTR_RULES).unwrap();
    fs::write(&cfg, QUICK_CFG).unwrap();
    (p(&rules), p(&cfg))
}

#[test]
fn gen_train_eval_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (rules, cfg) = fixture(dir.path());
    let data = p(&dir.path().join("attr.tsv"));
    let stdout = ok(&[
        "gen-data", "--rules", &rules, "--out", &data, "--count", "6", "--noise", "0.05",
        "--seed", "1",
    ]);
    assert!(stdout.contains("wrote 18 items"), "got: {stdout}");

    let ck_a = p(&dir.path().join("a"));
    let ck_b = p(&dir.path().join("b"));
    for ck in [&ck_a, &ck_b] {
        let stdout = ok(&[
            "train", "--rules", &rules, "--data", &data, "--out", ck, "--config", &cfg,
            "--seed", "0",
        ]);
        assert!(stdout.contains("checkpoint:"), "got: {stdout}");
    }
    let bytes_a = fs::read(Path::new(&ck_a).join("final")).unwrap();
    let bytes_b = fs::read(Path::new(&ck_b).join("final")).unwrap();
    assert_eq!(bytes_a, bytes_b, "identical seeds must give identical bytes");
    assert!(Path::new(&ck_a).join("diagnostics.txt").exists());
    assert!(Path::new(&ck_a).join("config.txt").exists());

    let final_ck = p(&Path::new(&ck_a).join("final"));
    let eval_dir = p(&dir.path().join("eval"));
    let stdout = ok(&[
        "eval", "--checkpoint", &final_ck, "--data", &data, "--out", &eval_dir,
    ]);
    assert!(stdout.contains("acc = "), "got: {stdout}");
    let metrics = fs::read_to_string(Path::new(&eval_dir).join("metrics.txt")).unwrap();
    assert_eq!(metrics, stdout);
    // Supplying the same rules passes the hash check; eval stays deterministic.
    let again = ok(&["eval", "--checkpoint", &final_ck, "--data", &data, "--rules", &rules]);
    assert_eq!(again, stdout);
}

#[test]
fn explain_reports_rules_in_source_syntax() {
    let dir = tempfile::tempdir().unwrap();
    let (rules, cfg) = fixture(dir.path());
    let data = p(&dir.path().join("attr.tsv"));
    ok(&[
        "gen-data", "--rules", &rules, "--out", &data, "--count", "6", "--noise", "0.05",
        "--seed", "1",
    ]);
    let ck = p(&dir.path().join("ck"));
    ok(&[
        "train", "--rules", &rules, "--data", &data, "--out", &ck, "--config", &cfg,
    ]);
    let final_ck = p(&Path::new(&ck).join("final"));
    let report_dir = p(&dir.path().join("rep"));
    let stdout = ok(&[
        "explain", "--checkpoint", &final_ck, "--data", &data, "--out", &report_dir,
    ]);
    assert!(stdout.contains("prediction:"), "got: {stdout}");
    assert!(stdout.contains("=>"), "a rule in source syntax: {stdout}");
    assert!(stdout.contains("posterior:"), "got: {stdout}");
    let report = fs::read_to_string(Path::new(&report_dir).join("report.txt")).unwrap();
    assert_eq!(report, stdout);
}

#[test]
fn infer_applies_a_rewritten_ruleset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quick.cfg");
    fs::write(&cfg, QUICK_CFG).unwrap();
    let cfg = p(&cfg);
    let data1 = p(&dir.path().join("d1.tsv"));
    let rules1 = p(&dir.path().join("add1.txt"));
    ok(&[
        "gen-data", "--digits", "1", "--out", &data1, "--rules-out", &rules1, "--count", "20",
        "--test-count", "6", "--noise", "0.05", "--seed", "3",
    ]);
    let ck = p(&dir.path().join("ck"));
    ok(&[
        "train", "--rules", &rules1, "--data", &data1, "--out", &ck, "--digits", "1",
        "--config", &cfg,
    ]);
    let final_ck = p(&Path::new(&ck).join("final"));

    let data2 = p(&dir.path().join("d2.tsv"));
    let rules2 = p(&dir.path().join("add2.txt"));
    ok(&[
        "gen-data", "--digits", "2", "--out", &data2, "--rules-out", &rules2, "--count", "0",
        "--test-count", "4", "--noise", "0.0", "--seed", "9",
    ]);
    let stdout = ok(&[
        "infer", "--checkpoint", &final_ck, "--rules", &rules2, "--data", &data2,
    ]);
    assert!(stdout.contains("item 0: predicted = "), "got: {stdout}");
    assert!(stdout.contains("digit(c0;"), "reasoning path: {stdout}");
    assert!(stdout.contains("exact match "), "got: {stdout}");

    // The same checkpoint scores the rewrite through eval's inductive mode.
    let stdout = ok(&[
        "eval", "--checkpoint", &final_ck, "--data", &data2, "--mode", "inductive",
        "--rules", &rules2,
    ]);
    assert!(stdout.contains("items = 4"), "got: {stdout}");
}

#[test]
fn ablate_emits_the_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let (rules, _) = fixture(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "em_rounds = 1\ne_passes = 1\nm_steps = 1\nbatch = 8\nhidden_dim = 4\nfeature_dim = 3\n",
    )
    .unwrap();
    let cfg = p(&cfg);
    let data = p(&dir.path().join("attr.tsv"));
    ok(&[
        "gen-data", "--rules", &rules, "--out", &data, "--count", "4", "--noise", "0.05",
        "--seed", "2",
    ]);
    let out = p(&dir.path().join("ab"));
    let stdout = ok(&[
        "ablate", "--rules", &rules, "--data", &data, "--config", &cfg, "--out", &out,
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 5, "header + 4 rows: {stdout}");
    assert!(lines[0].starts_with("variant"));
    for (line, name) in lines[1..].iter().zip(["full", "-SRM", "-NRM", "-OI"]) {
        assert!(line.starts_with(name), "row order: {stdout}");
        let acc: f64 = line
            .split_whitespace()
            .last()
            .unwrap()
            .parse()
            .expect("acc column");
        assert!((0.0..=1.0).contains(&acc), "acc column: {stdout}");
    }
    assert!(lines[1].contains("1.00") && lines[1].contains("1.00"));
    assert!(lines[2].contains("0.00"), "-SRM zeroes beta and gamma");
    assert!(lines[3].contains("0.50"), "-NRM halves alpha");
    let table = fs::read_to_string(Path::new(&out).join("ablation.txt")).unwrap();
    assert_eq!(table, stdout);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (rules, cfg) = fixture(dir.path());
    let data = p(&dir.path().join("attr.tsv"));
    ok(&[
        "gen-data", "--rules", &rules, "--out", &data, "--count", "6", "--noise", "0.1",
        "--seed", "10",
    ]);
    let out = p(&dir.path().join("ck"));

    // Usage errors: unknown subcommand, missing input file, unknown config key.
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(
        code(&["train", "--rules", "missing.txt", "--data", &data, "--out", &out]),
        1
    );
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "zzz = 1\n").unwrap();
    assert_eq!(
        code(&[
            "train", "--rules", &rules, "--data", &data, "--out", &out, "--config",
            &p(&bad_cfg),
        ]),
        1
    );

    // Data errors: unparsable rules, malformed dataset.
    let broken = dir.path().join("broken.txt");
    fs::write(&broken, "pred broken(((\n").unwrap();
    assert_eq!(
        code(&["train", "--rules", &p(&broken), "--data", &data, "--out", &out]),
        2
    );
    let bad_data = dir.path().join("bad.tsv");
    fs::write(&bad_data, "nonsense\n").unwrap();
    assert_eq!(
        code(&["train", "--rules", &rules, "--data", &p(&bad_data), "--out", &out]),
        2
    );

    // Divergence: an absurd concept rate pushes the scorer non-finite; the
    // run exits 3 and leaves a loadable last-good checkpoint behind.
    let div_cfg = dir.path().join("div.cfg");
    fs::write(
        &div_cfg,
        format!(
            "{QUICK_CFG}em_rounds = 1\nhidden_dim = 2\nfeature_dim = 2\nseed = 10\n\
             lr_theta1 = 0.05\nlr_w = 0.05\nlr_theta2 = 1.7976931348623157e308\n"
        ),
    )
    .unwrap();
    let div_out = p(&dir.path().join("div"));
    assert_eq!(
        code(&[
            "train", "--rules", &rules, "--data", &data, "--out", &div_out, "--config",
            &p(&div_cfg),
        ]),
        3
    );
    let rescued = p(&Path::new(&div_out).join("last_good"));
    assert_eq!(code(&["eval", "--checkpoint", &rescued, "--data", &data]), 0);
}

#[test]
fn flags_beat_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (rules, _) = fixture(dir.path());
    let data = p(&dir.path().join("attr.tsv"));
    ok(&[
        "gen-data", "--rules", &rules, "--out", &data, "--count", "5", "--noise", "0.05",
        "--seed", "4",
    ]);
    let cfg = dir.path().join("seeded.cfg");
    fs::write(&cfg, format!("{QUICK_CFG}seed = 7\n")).unwrap();
    let cfg = p(&cfg);

    let from_file = p(&dir.path().join("file"));
    let overridden = p(&dir.path().join("flag"));
    let matching = p(&dir.path().join("match"));
    ok(&["train", "--rules", &rules, "--data", &data, "--out", &from_file, "--config", &cfg]);
    ok(&[
        "train", "--rules", &rules, "--data", &data, "--out", &overridden, "--config", &cfg,
        "--seed", "8",
    ]);
    ok(&[
        "train", "--rules", &rules, "--data", &data, "--out", &matching, "--config", &cfg,
        "--seed", "7",
    ]);
    let file_bytes = fs::read(Path::new(&from_file).join("final")).unwrap();
    let flag_bytes = fs::read(Path::new(&overridden).join("final")).unwrap();
    let match_bytes = fs::read(Path::new(&matching).join("final")).unwrap();
    assert_ne!(file_bytes, flag_bytes, "a flag seed must override the file");
    assert_eq!(file_bytes, match_bytes, "equal seeds agree wherever set");
    // The resolved config echo records the winning values.
    let echo = fs::read_to_string(Path::new(&overridden).join("config.txt")).unwrap();
    assert!(echo.contains("seed = 8"), "got: {echo}");
}
