use std::fmt::Write as _;

use damex::harness::metrics::Utilization;

const CELL: usize = 40;
const LEFT: usize = 50;
const TITLE: usize = 24;
const HEADER: usize = 18;
const GAP: usize = 30;

/// One grayscale grid per layer: rows are datasets, columns experts, darker
/// means a larger mean routing weight. Datasets without foreground tokens
/// get outlined empty cells.
pub fn heatmap(layers: &[Utilization]) -> String {
    let experts = layers
        .iter()
        .flat_map(|u| u.rows.iter().flatten().map(Vec::len))
        .max()
        .unwrap_or(0);
    let panel = |u: &Utilization| TITLE + HEADER + u.datasets.len() * CELL;
    let width = LEFT + experts.max(1) * CELL + 10;
    let height: usize = layers.iter().map(|u| panel(u) + GAP).sum::<usize>().max(GAP);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let mut y0 = 0;
    for u in layers {
        let _ = writeln!(out, r#"<g class="layer" data-layer="{}">"#, u.block);
        let _ = writeln!(out, r#"<text x="4" y="{}">layer {}</text>"#, y0 + 16, u.block);
        for e in 0..experts {
            let x = LEFT + e * CELL + CELL / 2;
            let _ = writeln!(
                out,
                r#"<text x="{x}" y="{}" text-anchor="middle">e{e}</text>"#,
                y0 + TITLE + 12
            );
        }
        for (i, (d, row)) in u.datasets.iter().zip(&u.rows).enumerate() {
            let y = y0 + TITLE + HEADER + i * CELL;
            let _ = writeln!(out, r#"<text x="4" y="{}">d{d}</text>"#, y + CELL / 2 + 4);
            for e in 0..experts {
                let x = LEFT + e * CELL;
                match row {
                    Some(r) => {
                        let w = r.get(e).copied().unwrap_or(0.0).clamp(0.0, 1.0);
                        let level = (255.0 * (1.0 - w)).round() as u8;
                        let _ = writeln!(
                            out,
                            r#"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({level},{level},{level})" stroke="black" stroke-width="0.5"><title>d{d} e{e}: {w:.4}</title></rect>"#
                        );
                    }
                    None => {
                        let _ = writeln!(
                            out,
                            r#"<rect class="cell absent" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="none" stroke="gray" stroke-dasharray="3,3"><title>d{d}: no foreground tokens</title></rect>"#
                        );
                    }
                }
            }
        }
        let _ = writeln!(out, "</g>");
        y0 += panel(u) + GAP;
    }
    out.push_str("</svg>\n");
    out
}
