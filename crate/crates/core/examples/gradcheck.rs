//! Central-difference checks of the contrastive objective and the
//! detection loss on toy networks in double precision.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use timclr::gradcheck::run_all;
use timclr::loss::{GradCheckConfig, LossConfig};

fn main() -> timclr::Result<()> {
    for eps in [1e-6, 1e-4] {
        let cfg = GradCheckConfig { eps, samples: 200, ..GradCheckConfig::default() };
        let s = run_all(&cfg, &LossConfig::default())?;
        for (name, r) in [("L_MCL", &s.mcl), ("detection", &s.detection)] {
            println!(
                "eps {eps:.0e} {name:<10} max rel error {:.2e} at {} (analytic {:.3e}, numeric {:.3e}), {}",
                r.max_rel_error,
                r.worst_index,
                r.analytic,
                r.numeric,
                if r.passed() { "ok" } else { "FAILED" }
            );
        }
    }
    Ok(())
}
