use std::fs;

use clap::Parser;
use modsel::eval::{EvalReport, REPORT_HEADER};
use modsel::policy::PolicyParams;
use modsel::segmenter::SegParams;
use modsel_cli::commands::{self, Cli, Command};

fn parse(args: &[&str]) -> Command {
    Cli::try_parse_from(std::iter::once("modsel").chain(args.iter().copied()))
        .unwrap()
        .command
}

#[test]
fn pipeline_through_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (data, seg, rf, grpo, log, eval) = (
        p("data"),
        p("seg.ckpt"),
        p("rf.ckpt"),
        p("grpo.ckpt"),
        p("rf.csv"),
        p("eval.csv"),
    );

    let Command::GenData(a) = parse(&[
        "gen-data",
        "--out",
        &data,
        "--seg",
        "4",
        "--rl",
        "3",
        "--holdout",
        "3",
        "--seed",
        "2",
    ]) else {
        panic!()
    };
    commands::gen_data(&a).unwrap();

    let Command::TrainSeg(a) = parse(&["train-seg", "--data", &data, "--out", &seg, "--epochs", "3"]) else {
        panic!()
    };
    commands::train_seg_cmd(&a).unwrap();
    SegParams::from_checkpoint(&fs::read_to_string(&seg).unwrap()).unwrap();

    let Command::TrainRl(a) = parse(&[
        "train-rl",
        "--algo",
        "reinforce",
        "--data",
        &data,
        "--segmenter",
        &seg,
        "--out",
        &rf,
        "--log",
        &log,
        "--epochs",
        "2",
        "--gamma",
        "0.3",
    ]) else {
        panic!()
    };
    commands::train_rl_cmd(&a).unwrap();
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 3);

    let Command::TrainRl(a) = parse(&[
        "train-rl",
        "--algo",
        "grpo",
        "--data",
        &data,
        "--segmenter",
        &seg,
        "--reference",
        &rf,
        "--out",
        &grpo,
        "--epochs",
        "1",
        "--beta",
        "0.1",
        "--group-size",
        "4",
    ]) else {
        panic!()
    };
    commands::train_rl_cmd(&a).unwrap();
    let grpo_params = PolicyParams::from_checkpoint(&fs::read_to_string(&grpo).unwrap()).unwrap();
    assert_eq!(grpo_params.portions(), 4);

    let Command::Eval(a) = parse(&[
        "eval",
        "--data",
        &data,
        "--segmenter",
        &seg,
        "--policy",
        &format!("rf={rf}"),
        "--policy",
        &format!("grpo={grpo}"),
        "--out",
        &eval,
    ]) else {
        panic!()
    };
    let csv = commands::eval_cmd(&a).unwrap();
    assert_eq!(fs::read_to_string(&eval).unwrap(), csv);
    assert!(csv.starts_with(REPORT_HEADER));
    let report = EvalReport::from_csv(&csv).unwrap();
    let methods: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(
        methods,
        [
            "seg:t2",
            "seg:dw",
            "seg:all",
            "rf:sampled",
            "rf:greedy",
            "grpo:sampled",
            "grpo:greedy"
        ]
    );

    let Command::Serve(a) = parse(&["serve", "--data", &data, "--oracle", "--policy", &rf, "--port", "0"]) else {
        panic!()
    };
    let store = commands::session_store(&a).unwrap();
    assert_eq!(store.case_ids().len(), 3);
}

#[test]
fn argument_errors() {
    let bad: [&[&str]; 5] = [
        &["train-rl", "--algo", "grpo", "--data", "d", "--oracle", "--out", "o"],
        &["train-rl", "--algo", "ppo", "--data", "d", "--oracle", "--out", "o"],
        &["eval", "--data", "d"],
        &["eval", "--data", "d", "--oracle", "--policy", "noequals"],
        &["run-experiment", "--smoke", "--config", "c.toml", "--out", "o"],
    ];
    for args in bad {
        assert!(
            Cli::try_parse_from(std::iter::once("modsel").chain(args.iter().copied())).is_err(),
            "{args:?}"
        );
    }
}

#[test]
fn smoke_experiment_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let Command::RunExperiment(a) = parse(&[
        "run-experiment",
        "--smoke",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]) else {
        panic!()
    };
    let report = commands::run_experiment_cmd(&a).unwrap();
    assert_eq!(fs::read_to_string(out.join("eval.csv")).unwrap(), report.to_csv());
    assert!(out.join("data").join("manifest.json").exists());
    assert!(out.join("policies").join("grpo-beta-1.ckpt").exists());

    let missing = parse(&[
        "run-experiment",
        "--config",
        "/nonexistent.toml",
        "--out",
        out.to_str().unwrap(),
    ]);
    let Command::RunExperiment(a) = missing else { panic!() };
    assert!(commands::run_experiment_cmd(&a).is_err());
}
