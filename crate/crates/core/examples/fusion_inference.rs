//! Classifying a held-out domain with fused positive and negative scores.

use dpspg::cli::RunConfig;
use dpspg::datagen::leave_one_out_split;
use dpspg::inference::{evaluate_lodo, fuse_and_classify, EvalMode, Pipeline};
use dpspg::pipeline::{build_stack, train_fixed_prompt, train_labels, train_target};
use dpspg::theory::margin_report;

fn main() -> dpspg::Result<()> {
    let cfg = RunConfig::default();
    let stack = build_stack(&cfg)?;
    let labels = train_labels(&cfg, &stack, 0)?;
    let target = 0;
    let trained = train_target(&cfg, &stack, &labels, target, 0, false, false)?;
    let (fixed, fixed_prov) = train_fixed_prompt(&cfg, &stack, target, 0)?;
    let p = Pipeline::new(&stack.encoders, &stack.vocab)
        .with_generators(&trained.positive, trained.negative.as_ref(), &trained.provenance)
        .with_fixed_prompt(&fixed, &fixed_prov);

    for mode in EvalMode::ALL {
        let r = evaluate_lodo(&stack.dataset, target, &p, mode, cfg.alpha_fuse, cfg.tau, 0)?;
        println!("{:<14} accuracy {:.3}  per class {:.2?}", mode.as_str(), r.accuracy, r.per_class_accuracy);
    }
    for alpha in [0.0, 0.1, 0.2, 0.4, 0.8] {
        let r = evaluate_lodo(&stack.dataset, target, &p, EvalMode::Full, alpha, cfg.tau, 0)?;
        println!("alpha {alpha:.1}: accuracy {:.3}", r.accuracy);
    }

    // one sample in detail
    let split = leave_one_out_split(&stack.dataset, target)?;
    let s = &stack.dataset.samples[split.target_indices[7]];
    let f = fuse_and_classify(&p, &s.x, cfg.alpha_fuse, cfg.tau)?;
    println!("label {}, predicted {}, probs {:.3?}", s.label, f.predicted, f.probs);
    let m = margin_report(&f.s_pos, &f.s_neg, s.label, cfg.alpha_fuse)?;
    for e in &m.entries {
        println!(
            "  vs class {}: positive margin {:+.4}, negative gap {:+.4}, fused {:+.4}",
            e.class, e.delta_plus, e.neg_gap, e.delta_combined
        );
    }
    Ok(())
}
