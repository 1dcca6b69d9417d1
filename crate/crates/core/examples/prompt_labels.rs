//! Fitting the positive and negative prompt labels of one domain.

use dpspg::cli::RunConfig;
use dpspg::pipeline::build_stack;
use dpspg::promptlabels::{negative_target, train_domain_labels};

fn main() -> dpspg::Result<()> {
    let cfg = RunConfig::default();
    let stack = build_stack(&cfg)?;
    println!("negative target for class 1 of 3: {:?}", negative_target(1, 3)?.as_f64());

    let out = train_domain_labels(&stack.dataset, 2, &stack.encoders, &stack.vocab, &cfg.stage1_config(0))?;
    println!("epoch  ce      train  val    bce     neg_val");
    for h in out.history.iter().filter(|h| h.epoch == 1 || h.epoch % 10 == 0) {
        println!(
            "{:>5}  {:.4}  {:.3}  {:.3}  {:.4}  {:.3}",
            h.epoch,
            h.positive_loss,
            h.positive_train_accuracy,
            h.positive_val_accuracy,
            h.negative_loss,
            h.negative_val_accuracy
        );
    }
    let p = &out.pair;
    println!(
        "kept positive from epoch {} (val acc {:.3}), negative from epoch {} (val bce {:.4})",
        p.epoch_selected, p.val_accuracy, p.epoch_selected_negative, p.val_bce
    );
    println!("distance between the two labels {:.4}", p.positive.distance(&p.negative));
    Ok(())
}
