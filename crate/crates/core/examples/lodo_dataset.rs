//! Synthetic multi-domain data and the leave-one-domain-out protocol.

use dpspg::datagen::{generate_dataset, leave_one_out_split, DatasetSpec};
use dpspg::numkernel::{euclidean_distance, l2_norm};

fn main() -> dpspg::Result<()> {
    let spec = DatasetSpec::default();
    let ds = generate_dataset(&spec)?;
    println!(
        "{} samples: {} domains x {} classes x {} per class, d_raw = {}",
        ds.samples.len(),
        spec.num_domains,
        spec.num_classes,
        spec.n_per_class_per_domain,
        spec.d_raw
    );

    // how far each domain moves the class-0 cloud away from its prototype
    for (d, dom) in ds.domains.iter().enumerate() {
        let idx: Vec<usize> = ds.domain_indices(d).into_iter().filter(|&i| ds.samples[i].label == 0).collect();
        let mut mean = vec![0.0; spec.d_raw];
        for &i in &idx {
            mean.iter_mut().zip(&ds.samples[i].x).for_each(|(m, x)| *m += x / idx.len() as f64);
        }
        println!(
            "domain {d}: |shift| {:.3}, class-0 mean sits {:.3} from the prototype",
            l2_norm(&dom.shift),
            euclidean_distance(&mean, ds.prototypes.row(0))
        );
    }

    for t in 0..spec.num_domains {
        let s = leave_one_out_split(&ds, t)?;
        println!(
            "target {t}: sources {:?}, {} train / {} val, {} test",
            s.sources,
            s.source_train.len(),
            s.source_val.len(),
            s.target_indices.len()
        );
    }
    Ok(())
}
