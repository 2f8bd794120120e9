use std::fmt::Write as _;

use damex::harness::metrics::Utilization;
use damex::harness::EvalReport;

/// Human-readable evaluation summary, one line per MoE layer.
pub fn summary(r: &EvalReport) -> String {
    let mut out = String::new();
    let acc: Vec<String> = r.accuracy.iter().map(|(d, a)| format!("d{d}={a:.3}")).collect();
    let _ = writeln!(out, "accuracy {}", acc.join(" "));
    let mean = r.mean_purity();
    for (i, block) in r.blocks.iter().enumerate() {
        let _ = write!(out, "layer {block}:");
        if let Some(p) = r.purity.get(i) {
            for (d, v) in p {
                let _ = write!(out, " purity[d{d}]={v:.3}");
            }
            let _ = write!(out, " purity_mean={:.3}", mean[i]);
        }
        let _ = writeln!(out, " collapse={:.3} drop_rate={:.3}", r.collapse[i], r.drop_rate[i]);
    }
    out
}

/// `layer,dataset,expert,weight`; datasets without foreground tokens are left out.
pub fn utilization_csv(layers: &[Utilization]) -> String {
    let mut out = String::from("layer,dataset,expert,weight\n");
    for u in layers {
        for (d, row) in u.datasets.iter().zip(&u.rows) {
            if let Some(row) = row {
                for (e, w) in row.iter().enumerate() {
                    let _ = writeln!(out, "{},{d},{e},{w:?}", u.block);
                }
            }
        }
    }
    out
}
