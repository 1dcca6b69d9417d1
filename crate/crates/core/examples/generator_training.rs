//! Training the positive and negative prompt generators for one held-out
//! domain, next to the noisy single-path baseline.

use dpspg::cli::RunConfig;
use dpspg::diagnostics::training_stability;
use dpspg::pipeline::{build_stack, train_labels, train_target};

fn main() -> dpspg::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.stage2.epochs = 40;
    let stack = build_stack(&cfg)?;
    let labels = train_labels(&cfg, &stack, 0)?;
    let target = 1;

    for single in [false, true] {
        let t = train_target(&cfg, &stack, &labels, target, 0, single, true)?;
        let name = if single { "noisy single path" } else { "dual path" };
        println!("{name}: sources {:?}, input noise {:?}", t.provenance.sources, t.provenance.input_noise);
        println!("  val prompt distance before training {:.4}", t.initial_val_metric);
        for e in t.history.iter().filter(|e| e.epoch % 10 == 0) {
            println!("  epoch {:>3}  loss {:.5}  val {:.5}", e.epoch, e.loss, e.val_metric);
        }
        let acc: Vec<f64> = t.history.iter().filter_map(|e| e.observed).collect();
        let s = training_stability(&acc)?;
        println!(
            "  target accuracy {:.3}, std over the last 10 epochs {:.4}",
            s.final_accuracy, s.std_last_10
        );
    }
    Ok(())
}
