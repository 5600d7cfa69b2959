//! GeM routes gradient toward the strongest activations: the ratio of the
//! gradients at the largest and smallest token is (x_max/x_min)^(p-1).
//! Also runs the standalone finite-difference check of the pooling backward.

use ggem::gradcheck::{check_pooling, GRADCHECK_TOLERANCE};
use ggem::pooling::{gem_backward_x, gem_pool, ActivationMaps};
use ggem::tensor::Tensor;

fn main() -> ggem::Result<()> {
    let column = [0.5, 1.0, 2.0, 4.0];
    let maps = ActivationMaps::new(Tensor::new(vec![4, 1], column.to_vec())?)?;
    let upstream = Tensor::vector(vec![1.0])?;

    println!("   p   dv/dx per token                          max/min");
    for p in [1.0, 2.0, 4.0, 8.0] {
        let v = gem_pool(&maps, p)?;
        let g = gem_backward_x(&maps, &[p], &v, &upstream)?;
        let g = g.data();
        println!("{p:>4}   {:<40} {:.1}", format!("{g:.4?}"), g[3] / g[0]);
    }

    println!();
    for entry in check_pooling(0, true)? {
        let verdict = if entry.max_relative_error <= GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<22} {:.2e} {verdict}", entry.name, entry.max_relative_error);
    }
    Ok(())
}
