//! The `qbe` binary: subcommands chain through a run directory and errors
//! map to distinct exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qbe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qbe"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const SMALL: [&str; 10] = [
    "--set",
    "corpus.documents=12",
    "--set",
    "corpus.queries=6",
    "--set",
    "corpus.plant_rate=0.3",
    "--set",
    "corpus.train_utterances=6",
    "--set",
    "model.architecture=none",
];

fn synth(dir: &Path) -> String {
    let corpus = dir.join("c").display().to_string();
    let mut args = vec!["synth", "--corpus", &corpus];
    args.extend(SMALL);
    let o = qbe(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    corpus
}

#[test]
fn stages_one_at_a_time_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let staged = dir.path().join("staged").display().to_string();
    for stage in [
        "featurize",
        "train",
        "extract",
        "sad",
        "search",
        "znorm",
        "eval",
    ] {
        let mut args = vec![stage, "--corpus", &corpus, "--out", &staged];
        args.extend(SMALL);
        let o = qbe(&args);
        assert!(
            o.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let whole = dir.path().join("whole").display().to_string();
    let mut args = vec!["pipeline", "--corpus", &corpus, "--out", &whole];
    args.extend(SMALL);
    let o = qbe(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("cnxe_min = "), "{stdout}");
    for f in ["scores.znorm.tsv", "report.txt", "det.tsv"] {
        assert_eq!(
            fs::read(Path::new(&staged).join(f)).unwrap(),
            fs::read(Path::new(&whole).join(f)).unwrap(),
            "{f}"
        );
    }

    let det = dir.path().join("det.tsv").display().to_string();
    let scores = format!("{whole}/scores.znorm.tsv");
    let o = qbe(&[
        "det", "--corpus", &corpus, "--scores", &scores, "--output", &det,
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read(&det).unwrap(),
        fs::read(format!("{whole}/det.tsv")).unwrap()
    );
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("x.ini");
    fs::write(&ini, "[dtw]\nmax_consecutive_nondiagonal = 2\nslope = 3\n").unwrap();
    let o = qbe(&["pipeline", "--config", ini.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = qbe(&["synth", "--set", "dtw.max_consecutive_nondiagonal=0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unlabelled_trial_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("s.tsv");
    let labels = dir.path().join("l.tsv");
    fs::write(&scores, "q1\td1\t0.5\nq1\td2\t0.1\n").unwrap();
    fs::write(&labels, "q1\td1\t1\n").unwrap();
    let out = dir.path().join("r").display().to_string();
    let o = qbe(&[
        "eval",
        "--out",
        &out,
        "--scores",
        scores.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn comparing_a_run_with_itself_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let run = dir.path().join("r").display().to_string();
    let mut args = vec!["pipeline", "--corpus", &corpus, "--out", &run];
    args.extend(SMALL);
    assert!(qbe(&args).status.success());
    let o = qbe(&["compare", &run, &run]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
