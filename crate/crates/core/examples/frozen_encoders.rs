//! The frozen image/text encoder pair and its zero-shot behaviour.

use dpspg::datagen::{generate_dataset, DatasetSpec};
use dpspg::encoders::{build_vocabulary, EncoderConfig, EncoderPair};
use dpspg::numkernel::l2_norm;

fn zero_shot(enc: &EncoderPair, vocab: &dpspg::encoders::ClassVocabulary, ds: &dpspg::datagen::DomainDataset, d: usize) -> dpspg::Result<f64> {
    let idx = ds.domain_indices(d);
    let e = enc.encode_images(&ds.inputs(&idx)?)?;
    let text = enc.encode_text_batch(&enc.template_prompt(&vocab.positive_template), &vocab.positive_template, vocab)?;
    let sims = e.matmul(&text.transpose())?;
    let labels = ds.labels(&idx);
    let hits = (0..idx.len())
        .filter(|&i| {
            let row = sims.row(i);
            (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])) == Some(labels[i])
        })
        .count();
    Ok(hits as f64 / idx.len() as f64)
}

fn main() -> dpspg::Result<()> {
    let ds = generate_dataset(&DatasetSpec::default())?;
    let cfg = EncoderConfig::default();
    let vocab = build_vocabulary(ds.num_classes(), cfg.d_tok, 11)?;
    let mut enc = EncoderPair::new(&cfg, ds.spec.d_raw)?;

    let e = enc.encode_image(&ds.samples[0].x)?;
    println!("image embedding: {} dims, norm {:.6}", e.len(), l2_norm(&e));

    println!("before alignment: zero-shot accuracy on domain 0 {:.3}", zero_shot(&enc, &vocab, &ds, 0)?);
    let report = enc.align_to_prototypes(&vocab, &ds.prototypes)?;
    println!(
        "alignment residual {:.4}, mean prototype margin {:.4}",
        report.relative_residual, report.positive_zero_shot_margin
    );
    for d in 0..ds.spec.num_domains {
        println!("domain {d}: zero-shot accuracy {:.3}", zero_shot(&enc, &vocab, &ds, d)?);
    }
    Ok(())
}
