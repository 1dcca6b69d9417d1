//! Driving every command of the `dpspg` binary in-process on a tiny run.

use dpspg::cli::{run, RunConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.dataset.num_domains = 3;
    cfg.dataset.n_per_class_per_domain = 10;
    cfg.stage1.epochs = 10;
    cfg.stage2.epochs = 12;
    cfg.stage2.warmup_epochs = 1;
    cfg.seeds = vec![0, 1];
    let config = dir.path().join("config.json");
    std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = dir.path().join("run");
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());

    let steps: &[&[&str]] = &[
        &["gen-data"],
        &["train-labels"],
        &["train-generators", "--target", "0"],
        &["eval", "--target", "0", "--mode", "full"],
        &["eval", "--target", "0", "--mode", "positive_only"],
        &["eval", "--target", "0", "--mode", "fixed_prompt"],
        &["verify", "--target", "0"],
        &["report"],
    ];
    for step in steps {
        let mut args = vec!["dpspg"];
        args.extend_from_slice(step);
        args.extend_from_slice(&["--config", c, "--out", o]);
        println!("$ {}", args.join(" "));
        let code = run(&args);
        if code != 0 {
            std::process::exit(code);
        }
    }
    // out of order: exit code 3
    let code = run(["dpspg", "eval", "--target", "2", "--config", c, "--out", o]);
    println!("eval before training target 2 exits with {code}");
}
