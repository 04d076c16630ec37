//! Round-trips a cost profile through CSV and fits the affine proxy to a
//! synthetic profile with known coefficients.

use prefix_attn::cost_model::{fit_affine, profile_synthetic, ProfileMeta};
use prefix_attn::CostTable;

fn main() {
    let table = CostTable::bundled();
    let csv = table.dump();
    let reloaded = CostTable::from_csv_str(
        &csv,
        ProfileMeta {
            d: None,
            label: "reloaded".into(),
        },
    )
    .expect("profile parses");
    assert_eq!(reloaded.dump(), csv);
    println!("bundled profile, {} lines of CSV, reload is exact", csv.lines().count());

    let (alpha, beta, gamma) = (0.03, 1.5e-5, 4.0e-7);
    let synthetic = profile_synthetic(alpha, beta, gamma).unwrap();
    let fit = fit_affine(&synthetic);
    println!("true   alpha {alpha:.3e} beta {beta:.3e} gamma {gamma:.3e}");
    println!(
        "fitted alpha {:.3e} beta {:.3e} gamma {:.3e}",
        fit.alpha, fit.beta, fit.gamma
    );
    println!("max residual {:.2e}", fit.max_residual);
}
