//! Queries the bundled kernel cost table and a fitted affine proxy.

use prefix_attn::cost_model::fit_affine;
use prefix_attn::{CostEstimator, CostTable};

fn main() {
    let table = CostTable::bundled();
    println!("profile: {}", table.meta().label);
    println!("n_q knots {:?}", table.nq_knots());
    println!("n knots   {:?}", table.n_knots());

    let fit = fit_affine(&table);
    let proxy = fit.model();
    println!(
        "affine fit: alpha {:.4} ms, beta {:.3e} ms/token, gamma {:.3e} ms/(token*query), rms residual {:.4}",
        fit.alpha, fit.beta, fit.gamma, fit.rms_residual
    );

    println!("{:>6} {:>6} {:>10} {:>10}", "n_q", "n", "table", "affine");
    for (n_q, n) in [(1, 512), (3, 700), (10, 4096), (64, 12000), (100, 16384), (200, 40000)] {
        println!(
            "{n_q:>6} {n:>6} {:>10.4} {:>10.4}",
            table.estimate(n_q, n),
            proxy.estimate(n_q, n)
        );
    }
}
