//! Checking tape gradients against central differences.

use dpspg::numkernel::{grad_check, init_transformer_layer, transformer_layer, ParamStore, Tensor, TransformerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dpspg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = TransformerConfig::new(8, 2, 16);
    let mut store = ParamStore::new();
    init_transformer_layer(&mut store, "block", &cfg, false, &mut rng)?;
    store.insert("readout", Tensor::randn(&[8, 4], 0.3, &mut rng), false);
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let labels = [0, 3, 1, 2, 2];

    let report = grad_check(
        |g, p| {
            let xv = g.constant(x.clone());
            let h = transformer_layer(g, xv, p, "block", &cfg)?;
            let w = g.param(p, "readout")?;
            let z = g.matmul(h, w)?;
            g.cross_entropy(z, &labels)
        },
        &store,
        1e-5,
    )?;
    println!(
        "{} coordinates checked, worst relative error {:.2e} at {}[{}]",
        report.coords_checked, report.max_relative_error, report.worst_param, report.worst_index
    );
    Ok(())
}
