//! A small multi-seed sweep: accuracy, prompt variability and stability.

use dpspg::cli::RunConfig;
use dpspg::diagnostics::seed_sweep;
use dpspg::inference::EvalMode;

fn main() -> dpspg::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.dataset.n_per_class_per_domain = 20;
    cfg.stage1.epochs = 30;
    cfg.stage2.epochs = 20;
    cfg.stage2.warmup_epochs = 2;
    let out = seed_sweep(&cfg, &[0, 1], 1)?;

    for mode in EvalMode::ALL {
        println!("{:<14} mean accuracy {:.3}", mode.as_str(), out.mean_accuracy(mode));
    }
    println!("noisy single path mean accuracy {:.3}", out.mean_single_path_accuracy());
    for v in ["dual_positive", "single_positive"] {
        println!("{v}: mean lambda {:.4}", out.mean_lambda(v));
    }
    println!(
        "last-10 accuracy std: dual {:.4}, single {:.4}",
        out.mean_stability(false),
        out.mean_stability(true)
    );
    let dir = std::env::temp_dir().join("dpspg_variability_sweep");
    for p in out.write(&dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
