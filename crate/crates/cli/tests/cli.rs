use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atc_cli::commands;
use atc_cli::options::{AblationMode, EvalConfig, RunConfig, SweepParam};
use atc_cli::report::{read_reports, Report};
use atc_cli::{exit_code, EXIT_USAGE};
use atc_core::dataio::{sample_episode, Role, SynthConfig};
use atc_core::model::{evaluate, AtcModel};
use atc_core::numerics::Rng;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn synth(&self, sub: &str, cfg: SynthConfig) -> [PathBuf; 3] {
        let dir = self.path(sub);
        commands::synth(&cfg, &dir).unwrap();
        commands::SYNTH_FILES.map(|f| dir.join(f))
    }
}

fn small() -> SynthConfig {
    SynthConfig {
        num_classes: 5,
        dim: 16,
        shots: 4,
        queries_per_class: 20,
        ..SynthConfig::default()
    }
}

fn atc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atc")).args(args).output().unwrap()
}

fn atc_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atc"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn stdout_reports(out: &Output) -> Vec<Report> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn quick_run(files: &[PathBuf; 3], seed: u64) -> RunConfig {
    let mut run = RunConfig::new(files[0].clone(), files[1].clone(), vec![files[2].clone()], seed);
    run.episode.shots = 2;
    run.train.epochs = 3;
    run.model.chunks = 4;
    run.model.hidden = 8;
    run
}

#[test]
fn noiseless_synthetic_data_is_solved_zero_shot() {
    let env = Env::new();
    let out = atc(&[
        "synth",
        "--out-dir",
        &env.s("d"),
        "--sigma",
        "0",
        "--text-noise",
        "0",
        "--classes",
        "4",
    ]);
    assert!(out.status.success());
    let text = env.s("d/text.ate");
    let out = atc(&[
        "zeroshot",
        "--text",
        &text,
        "--query",
        &env.s("d/query.ate"),
        "--query",
        &text,
    ]);
    assert!(out.status.success());
    let reports = stdout_reports(&out);
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.accuracy, Some(1.0));
        assert_eq!(r.correct, r.total);
    }
    assert_eq!(reports[1].dataset.as_deref(), Some("text"));
}

#[test]
fn same_seed_synth_is_byte_identical() {
    let env = Env::new();
    let a = env.synth("a", small());
    let b = env.synth("b", small());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let env = Env::new();
    let files = env.synth("d", small());
    let cfg = env.path("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "text = {:?}\nsupport = {:?}\nquery = [{:?}]\nseed = 3\nepochs = 2\nshots = 2\nchunks = 4\nhidden = 8\nalpha = 0.25\nrenorm = \"off\"\nactivation = \"tip:4\"\n",
            p(&files[0]),
            p(&files[1]),
            p(&files[2])
        ),
    )
    .unwrap();
    let out = atc(&["train", "--config", p(&cfg), "--epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = &stdout_reports(&out)[0];
    assert_eq!(r.metrics.len(), 1);
    assert_eq!(r.config["train"]["seed"], 3);
    assert_eq!(r.config["model"]["alpha"], 0.25);
    assert_eq!(r.config["model"]["renormalize_text"], false);
    assert_eq!(r.config["model"]["activation"]["sharpness"], 4.0);

    std::fs::write(&cfg, "bogus-key = 1\n").unwrap();
    assert_eq!(atc(&["train", "--config", p(&cfg)]).status.code(), Some(EXIT_USAGE));
}

#[test]
fn usage_errors_exit_two() {
    let env = Env::new();
    let files = env.synth("d", small());
    let base = [
        "--text",
        p(&files[0]),
        "--support",
        p(&files[1]),
        "--query",
        p(&files[2]),
    ];
    let with = |extra: &[&str], cmd: &str| {
        let mut v = vec![cmd];
        v.extend(base);
        v.extend(extra);
        atc(&v).status.code()
    };
    assert_eq!(with(&["--mode", "sideways"], "ablate"), Some(2));
    assert_eq!(with(&["--activation", "relu"], "train"), Some(2));
    assert_eq!(with(&["--visual-mode", "dense"], "train"), Some(2));
    assert_eq!(with(&["--renorm", "maybe"], "train"), Some(2));
    assert_eq!(with(&["--lr", "-1"], "train"), Some(2));
    assert_eq!(atc(&["zeroshot", "--query", p(&files[2])]).status.code(), Some(2));
    let out = atc_env(
        &["zeroshot", "--text", p(&files[0]), "--query", p(&files[2])],
        "ATC_THREADS",
        "zero",
    );
    assert_eq!(out.status.code(), Some(2));

    let cfg = EvalConfig {
        ckpt: env.path("missing.ck"),
        text: files[0].clone(),
        support: files[1].clone(),
        queries: vec![files[2].clone()],
        alpha: None,
        beta: None,
    };
    let err = commands::sweep(&cfg, SweepParam::Alpha, &[], None).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_USAGE);
    let err = commands::ablate(&quick_run(&files, 0), &[], None).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_USAGE);
}

#[test]
fn validation_failures_exit_three_without_outputs() {
    let env = Env::new();
    let files = env.synth("d", small());
    let wide = env.synth("w", SynthConfig { dim: 32, ..small() });
    let ckpt = env.path("c.ck");
    let report = env.path("r.jsonl");
    let out = atc(&[
        "train",
        "--text",
        p(&files[0]),
        "--support",
        p(&files[1]),
        "--query",
        p(&wide[2]),
        "--ckpt",
        p(&ckpt),
        "--report",
        p(&report),
        "--shots",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!ckpt.exists() && !report.exists());

    let out = atc(&["zeroshot", "--text", p(&files[1]), "--query", p(&files[2])]);
    assert_eq!(out.status.code(), Some(3), "support file used as text");
    let out = atc(&[
        "train",
        "--text",
        p(&files[0]),
        "--support",
        p(&files[1]),
        "--query",
        p(&files[2]),
        "--shots",
        "99",
    ]);
    assert_eq!(out.status.code(), Some(3), "episode larger than the pool");
    let out = atc(&["zeroshot", "--text", &env.s("nope.ate"), "--query", p(&files[2])]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn training_pipeline_laws() {
    let env = Env::new();
    let files = env.synth("d", small());

    // lr = 0 reports the accuracy of the untrained model on the same episode
    let mut frozen = quick_run(&files, 1);
    frozen.train.learning_rate = 0.0;
    let (trained, r_frozen) = commands::train_run(&frozen, Some(1)).unwrap();
    let inputs = commands::Inputs::load(&files[0], Some(&files[1]), &files[2..]).unwrap();
    let support = inputs.support.as_ref().unwrap();
    let idx = sample_episode(support.labels(), 5, &frozen.episode).unwrap();
    let episode = support.subset(&idx, Role::Support).unwrap();
    let fresh = AtcModel::new(&inputs.text, &episode, &frozen.model, &mut Rng::new(1)).unwrap();
    assert_eq!(trained.model.flat_trainables(), fresh.flat_trainables());
    assert_eq!(
        Some(evaluate(&fresh, &inputs.queries[0].1, 1).unwrap().correct),
        r_frozen[0].correct
    );

    let ablated = commands::ablate(&frozen, &[AblationMode::FixedVisual, AblationMode::BiasVisual], Some(2)).unwrap();
    assert_eq!(ablated[0].correct, ablated[1].correct);

    // fixed text + fixed visual + alpha = 0 is exactly zero-shot
    let mut reduced = quick_run(&files, 1);
    reduced.model.alpha = 0.0;
    reduced.model.visual_mode = atc_core::caches::VisualMode::Fixed;
    let ablated = commands::ablate(&reduced, &[AblationMode::FixedText], None).unwrap();
    let zs = commands::zeroshot(&files[0], &files[2..]).unwrap();
    assert_eq!(ablated[0].correct, zs[0].correct);
    assert_eq!(ablated[0].mode.as_deref(), Some("fixed-text"));

    // thread count never changes results
    let (_, a) = commands::train_run(&quick_run(&files, 2), Some(1)).unwrap();
    let (_, b) = commands::train_run(&quick_run(&files, 2), Some(4)).unwrap();
    assert!(a[0].same_outcome(&b[0]));
}

#[test]
fn eval_and_sweep_are_consistent_and_idempotent() {
    let env = Env::new();
    let files = env.synth("d", small());
    let extra = env.synth("e", SynthConfig { seed: 99, ..small() });
    let ckpt = env.path("c.ck");
    let mut run = quick_run(&files, 4);
    run.ckpt = Some(ckpt.clone());
    commands::train_run(&run, None).unwrap();
    let before = std::fs::read(&ckpt).unwrap();

    let cfg = EvalConfig {
        ckpt: ckpt.clone(),
        text: files[0].clone(),
        support: files[1].clone(),
        queries: vec![files[2].clone(), extra[2].clone()],
        alpha: None,
        beta: None,
    };
    let first = commands::eval(&cfg, None).unwrap();
    let second = commands::eval(&cfg, None).unwrap();
    assert_eq!(first.len(), 2);
    assert!(first.iter().zip(&second).all(|(a, b)| a.same_outcome(b)));

    let text_only = commands::eval(
        &EvalConfig {
            alpha: Some(0.0),
            ..cfg.clone()
        },
        None,
    )
    .unwrap();
    let sweep = commands::sweep(&cfg, SweepParam::Alpha, &SweepParam::Alpha.default_values(), None).unwrap();
    assert_eq!(sweep.len(), 10);
    for (i, query) in [0, 1].into_iter().zip(["query", "query"]) {
        let rows: Vec<_> = sweep[i * 5..(i + 1) * 5].iter().collect();
        assert!(rows.iter().all(|r| r.dataset.as_deref() == Some(query)));
        assert_eq!(rows[0].correct, text_only[i].correct);
        assert_eq!(rows[2].correct, first[i].correct);
        assert_eq!(rows.iter().filter(|r| r.best == Some(true)).count(), 1);
    }
    let beta = commands::sweep(&cfg, SweepParam::Beta, &[1.0, 2.0], None).unwrap();
    assert_eq!(beta[0].correct, first[0].correct);
    assert!(beta.iter().all(|r| r.config["alpha"] == 1.0));
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        before,
        "overrides must not touch the checkpoint"
    );
}

#[test]
fn reports_append_and_reproduce() {
    let env = Env::new();
    let files = env.synth("d", small());
    let report = env.path("r.jsonl");
    let args = [
        "train",
        "--text",
        p(&files[0]),
        "--support",
        p(&files[1]),
        "--query",
        p(&files[2]),
        "--shots",
        "2",
        "--epochs",
        "2",
        "--chunks",
        "4",
        "--hidden",
        "8",
        "--seed",
        "5",
        "--report",
        p(&report),
    ];
    for _ in 0..2 {
        assert!(atc(&args).status.success());
    }
    let records = read_reports(&report).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records[0].same_outcome(&records[1]));
    let r = &records[0];
    assert_eq!(r.accuracy, Some(r.correct.unwrap() as f64 / r.total.unwrap() as f64));
    assert_eq!(r.seed, Some(5));
    assert_eq!(r.metrics.len(), 2);
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let out = atc(&["gradcheck", "--seed", "0", "--count", "1"]);
    assert!(out.status.success());
    let report = &stdout_reports(&out)[0];
    assert_eq!(report.gradcheck.len(), 4);
    for case in report.gradcheck.iter().filter(|c| !c.case.renormalize) {
        for g in case.report.groups.iter().filter(|g| g.name.starts_with("net.")) {
            assert!(g.max_abs_analytic <= 1e-10);
        }
    }

    let out = atc(&["gradcheck", "--count", "1", "--corrupt-backward"]);
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("worst coordinate"), "{stderr}");
}
