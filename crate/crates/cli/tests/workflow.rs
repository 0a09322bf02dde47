use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use disc_cli::commands::CACHE_ENV;
use disc_core::container::Container;
use disc_core::trainer::Trainer;

const TINY: &str = "\
[model]
codebook = 8
enc_channels = 8
dec_channels = 8
speaker_dim = 4
pext_channels = 8
cls_channels = 8

[train]
batch_size = 2
t_crop = 16
steps = 4
checkpoint_every = 2
";

fn disc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disc-vc"))
        .args(args)
        .current_dir(dir)
        .env_remove(CACHE_ENV)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Synthetic corpus (2 speakers, 2 train and 1 test clip each) with a
    /// preprocessed cache in `cache/`.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        ok(disc(&["synth", "--out", "corpus", "--train", "2", "--test", "1"], d));
        fs::write(d.join("tiny.cfg"), TINY).unwrap();
        ok(disc(&["preprocess", "corpus/manifest.csv", "--cache", "cache", "--config", "tiny.cfg"], d));
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        disc(args, self.dir.path())
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let mut args = vec!["train", "--cache", "cache", "--config", "tiny.cfg", "--out", out];
        args.extend_from_slice(extra);
        ok(self.run(&args))
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn preprocess_is_deterministic_and_reports_the_cache() {
    let f = Fixture::new();
    let first = files(&f.path("cache"));
    assert_eq!(first.len(), 6 + 2);
    let out = ok(f.run(&["preprocess", "corpus/manifest.csv", "--cache", "cache", "--config", "tiny.cfg"]));
    assert!(out.starts_with("# effective config\n[audio]\n"));
    assert_eq!(files(&f.path("cache")), first);

    let env_out = Command::new(env!("CARGO_BIN_EXE_disc-vc"))
        .args(["preprocess", "corpus/manifest.csv"])
        .current_dir(f.dir.path())
        .env(CACHE_ENV, f.path("cache2"))
        .output()
        .unwrap();
    ok(env_out);
    assert_eq!(files(&f.path("cache2")), first);

    let info = ok(f.run(&["inspect", "cache"]));
    assert!(info.contains("6 utterances, 2 speakers"), "{info}");
    assert!(info.contains("1 low: train 2, test 1"), "{info}");
    let entry = ok(f.run(&["inspect", "cache/wav_low_test002.feat"]));
    assert!(entry.contains("tensor logmel [80,"), "{entry}");
    assert!(entry.contains("speaker = 1"), "{entry}");
}

#[test]
fn preprocess_error_policy() {
    let f = Fixture::new();
    fs::write(f.path("corpus/wav/low/train000.wav"), b"not a wav").unwrap();
    let abort = f.run(&["preprocess", "corpus/manifest.csv", "--cache", "c2"]);
    assert_eq!(code(&abort), 3);
    let out = ok(f.run(&["preprocess", "corpus/manifest.csv", "--cache", "c2", "--on-error", "continue"]));
    assert!(out.contains("skipping"), "{out}");
    assert!(out.contains("cached 5 utterances (1 skipped)"), "{out}");
}

#[test]
fn train_writes_log_and_checkpoints_with_embedded_config() {
    let f = Fixture::new();
    let out = f.train("run", &["--seed", "3"]);
    assert!(out.contains("seed = 3"));
    let names: Vec<String> = files(&f.path("run")).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["checkpoint-000002.disc", "checkpoint-000004.disc", "final.disc", "train_log.csv"]);
    let log = fs::read_to_string(f.path("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let tr = Trainer::load(f.path("run/final.disc")).unwrap();
    let embedded = disc_cli::commands::checkpoint_config(&tr).unwrap();
    let mut expected = disc_cli::RunConfig::from_text(TINY).unwrap();
    expected.train.seed = 3;
    expected.model.speakers = 2;
    assert_eq!(embedded, expected);
    assert_eq!(disc_cli::commands::checkpoint_speakers(&tr), ["low", "high"]);

    let again = f.train("run2", &["--seed", "3"]);
    assert_eq!(again, out);
    assert_eq!(fs::read(f.path("run/final.disc")).unwrap(), fs::read(f.path("run2/final.disc")).unwrap());

    let info = ok(f.run(&["inspect", "run/final.disc"]));
    assert!(info.contains("state.step = 4"), "{info}");
    assert!(info.contains("run.audio.sample_rate = 16000"), "{info}");
}

#[test]
fn no_aux_zeroes_the_auxiliary_columns() {
    let f = Fixture::new();
    let out = f.train("ablation", &["--no-aux"]);
    assert!(out.contains("no_aux = true"));
    let log = fs::read_to_string(f.path("ablation/train_log.csv")).unwrap();
    let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
    for row in log.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        for name in ["p", "p0", "p1", "p2", "t", "t1", "t2"] {
            let i = header.iter().position(|h| *h == name).unwrap();
            assert_eq!(cols[i].parse::<f64>().unwrap(), 0.0, "{name} in {row}");
        }
        let like = header.iter().position(|h| *h == "like").unwrap();
        assert!(cols[like].parse::<f64>().unwrap() != 0.0);
    }
}

#[test]
fn resume_continues_the_run_exactly() {
    let f = Fixture::new();
    f.train("full", &[]);
    f.train("half", &["--steps", "2"]);
    f.train("half", &["--resume", "half/final.disc"]);
    assert_eq!(fs::read(f.path("full/final.disc")).unwrap(), fs::read(f.path("half/final.disc")).unwrap());
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(f.path(p))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a).to_string())
            .collect()
    };
    assert_eq!(strip("full/train_log.csv"), strip("half/train_log.csv"));
}

#[test]
fn convert_maps_flags_and_writes_audio_with_features() {
    let f = Fixture::new();
    f.train("run", &[]);
    let base = ["convert", "run/final.disc", "--cache", "cache", "--id", "wav_low_test002"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        f.run(&a)
    };
    let out = ok(with(&["--task", "P", "--beta", "log1.5", "-o", "out/p.wav"]));
    assert!(out.contains(&format!("beta={} pitch=1 timbre=1", 1.5f64.ln())), "{out}");
    let clip = disc_core::audio::read_wav(f.path("out/p.wav")).unwrap();
    let feat = Container::load(f.path("out/p.feat")).unwrap();
    let frames = feat.tensor("f0").unwrap().len();
    assert_eq!(feat.tensor("logmel").unwrap().shape(), [80, frames]);
    assert_eq!(clip.len(), (frames - 1) * 256);

    let out = ok(with(&["--task", "T", "--timbre-speaker", "high", "-o", "out/t.wav"]));
    assert!(out.contains("beta=0 pitch=1 timbre=2"), "{out}");
    let out = ok(with(&["--task", "PT", "--timbre-speaker", "2", "-o", "out/pt.wav"]));
    assert!(out.contains("beta=0 pitch=2 timbre=2"), "{out}");
    ok(with(&["--task", "T", "--timbre-speaker", "high", "-o", "out/t2.wav"]));
    assert_eq!(fs::read(f.path("out/t.wav")).unwrap(), fs::read(f.path("out/t2.wav")).unwrap());

    let wav = ok(f.run(&[
        "convert", "run/final.disc", "--cache", "cache", "--input", "corpus/wav/high/test002.wav", "--speaker", "high",
        "--task", "T", "--timbre-speaker", "low", "-o", "out/w.wav",
    ]));
    assert!(wav.contains("(speaker 2)"), "{wav}");

    for bad in [
        &["--task", "P", "--beta", "0.4", "--timbre-speaker", "high", "-o", "x.wav"][..],
        &["--task", "T", "--beta", "0.4", "--timbre-speaker", "high", "-o", "x.wav"],
        &["--task", "PT", "--pitch-speaker", "low", "--timbre-speaker", "high", "-o", "x.wav"],
        &["--task", "T", "--timbre-speaker", "nobody", "-o", "x.wav"],
        &["--task", "Q", "-o", "x.wav"],
        &["--task", "P", "--beta", "0.1", "--input", "corpus/wav/high/test002.wav", "--speaker", "high", "-o", "x.wav"],
    ] {
        assert_eq!(code(&with(bad)), 2, "{bad:?}");
    }
    let missing = f.run(&["convert", "run/final.disc", "--cache", "cache", "--id", "nope", "-o", "x.wav"]);
    assert_eq!(code(&missing), 3);
    let none = f.run(&["convert", "run/missing.disc", "--cache", "cache", "--id", "wav_low_test002", "-o", "x.wav"]);
    assert_eq!(code(&none), 3);
}

#[test]
fn evaluate_reports_per_pair_and_aggregate_rows() {
    let f = Fixture::new();
    f.train("run", &[]);
    let mut pairs = fs::read_to_string(f.path("corpus/pairs.csv")).unwrap();
    pairs.push_str("self,PT,wav/low/test002.wav,,,,wav/low/test002.wav\n");
    fs::write(f.path("corpus/pairs.csv"), pairs).unwrap();
    let args = ["evaluate", "run/final.disc", "corpus/pairs.csv", "--cache", "cache", "--gl-iters", "8"];
    let mut a = args.to_vec();
    a.extend(["--out", "report"]);
    let out = ok(f.run(&a));
    assert!(out.contains("# effective config"));
    let csv = fs::read_to_string(f.path("report/report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "pair,task,delta_f0,mcd");
    assert_eq!(rows.len(), 1 + 8 + 1);
    assert_eq!(*rows.last().unwrap(), "self,PT,0.000000,0.000000");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("report/report.json")).unwrap()).unwrap();
    let aggs = json["aggregates"].as_array().unwrap();
    assert_eq!(aggs.iter().map(|a| a["task"].as_str().unwrap()).collect::<Vec<_>>(), ["P", "T", "PT"]);
    let p_rows: Vec<f64> = json["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["task"] == "P")
        .map(|r| r["delta_f0"].as_f64().unwrap())
        .collect();
    let mean = p_rows.iter().sum::<f64>() / p_rows.len() as f64;
    assert!((aggs[0]["delta_f0"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(aggs[0]["pairs"], 4);

    let mut b = args.to_vec();
    b.extend(["--out", "report2"]);
    ok(f.run(&b));
    assert_eq!(files(&f.path("report")), files(&f.path("report2")));
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let f = Fixture::new();
    assert_eq!(code(&f.run(&["train", "--cache", "cache", "--set", "train.warmup=3"])), 2);
    assert_eq!(code(&f.run(&["train", "--cache", "cache", "--set", "train.t_crop=4"])), 2);
    assert_eq!(code(&f.run(&["train", "--cache", "cache", "--config", "missing.cfg"])), 2);
    assert_eq!(code(&f.run(&["train", "--cache", "nowhere"])), 3);
    assert_eq!(code(&f.run(&["preprocess", "corpus/none.csv"])), 3);
    assert_eq!(code(&f.run(&["frobnicate"])), 2);
    assert_eq!(code(&f.run(&["inspect", "tiny.cfg"])), 3);
    let huge = f.run(&["train", "--cache", "cache", "--config", "tiny.cfg", "--set", "train.lr=1e300", "--out", "blown"]);
    assert_eq!(code(&huge), 4, "{}", String::from_utf8_lossy(&huge.stderr));
}
