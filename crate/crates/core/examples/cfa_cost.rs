// Parameter and multiply-add counts of CFA against PAM-CAM.

use ftn::cfa::{Cfa, CfaConfig, CostReport, PamCam};

fn main() -> ftn::Result<()> {
    println!("{:>6} {:>12} {:>12} {:>7} {:>14} {:>14}", "C", "cfa params", "pam-cam", "ratio", "cfa madds", "pam-cam madds");
    for c in [64, 256, 512, 1024, 2048] {
        let shape = [1, c, 16, 8];
        let cfa = CostReport::new(&Cfa::descriptor(CfaConfig::new(c)?), shape);
        let dual = CostReport::new(&PamCam::descriptor(c), shape);
        println!(
            "{c:>6} {:>12} {:>12} {:>7.3} {:>14} {:>14}",
            cfa.params,
            dual.params,
            cfa.params as f64 / dual.params as f64,
            cfa.mult_adds,
            dual.mult_adds
        );
    }
    // a larger squeeze trades capacity for cost
    for n in [1, 2, 4] {
        let r = CostReport::new(&Cfa::descriptor(CfaConfig::with_pool_factor(1024, n)?), [1, 1024, 16, 8]);
        println!("pool factor {n}: {} params", r.params);
    }
    Ok(())
}
