//! Fixture builders shared by the benchmark targets.

use matchgap::panel::BiennialPanel;
use matchgap::synth::{self, MarketBuilder};

/// A mid-sized market with real class and type structure: enough firms
/// and movers for the kernels to show their scaling, small enough to
/// keep benchmark walltime reasonable.
pub fn bench_market(firms_per_class: usize) -> BiennialPanel {
    let spec = MarketBuilder::new(4, 3)
        .seed(9090)
        .firms_per_class(firms_per_class)
        .firm_size_law(3.4, 0.4)
        .mover_share(0.35)
        .sigma(0.12)
        .additive_wages(1.0, 0.35, 0.25, 0.02)
        .gender_offsets(-0.1, 0.0)
        .build();
    let (panel, _) = synth::generate_market(&spec).expect("benchmark market generates");
    panel
}
