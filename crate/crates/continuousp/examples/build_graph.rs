//! Builds the periodic graph for rock salt and prints what the energy
//! network sees: the density-derived cutoff, the edge list with image
//! offsets, and the smeared distance features of one edge.

use continuousp::graph::{build_graph, GraphConfig};
use continuousp::suites::rock_salt_unit;
use continuousp::Result;

fn main() -> Result<()> {
    let unit = rock_salt_unit(5.64);
    let cfg = GraphConfig::default();
    let graph = build_graph(&unit, &cfg)?;

    println!(
        "rock salt, a = 5.64 A: {} atoms, volume {:.2} A^3",
        graph.n_atoms,
        unit.volume()
    );
    println!(
        "cutoff {:.3} A ({} x (V/n)^(1/3)), {} directed edges, {:.1} per atom",
        graph.cutoff,
        cfg.cutoff_multiplier,
        graph.edges.len(),
        graph.edges.len() as f64 / graph.n_atoms as f64
    );

    // Every edge carries the image offset that realizes its distance, so
    // periodic copies of the same neighbor show up as distinct edges.
    println!("\nfirst edges out of atom 0:");
    for edge in graph.edges.iter().filter(|e| e.source == 0).take(6) {
        println!(
            "  0 -> {} image {:?}  d = {:.4} A",
            edge.neighbor, edge.image, edge.dist
        );
    }

    let nn = graph
        .edges
        .iter()
        .min_by(|a, b| a.dist.total_cmp(&b.dist))
        .expect("graph of a valid unit has edges");
    println!(
        "\nnearest pair: {} -> {} at {:.4} A (a/2 = {:.4})",
        nn.source,
        nn.neighbor,
        nn.dist,
        5.64 / 2.0
    );

    let idx = graph
        .edges
        .iter()
        .position(|e| e.source == nn.source && e.neighbor == nn.neighbor && e.image == nn.image)
        .expect("edge came from this list");
    let feat = graph.features.column(idx);
    println!(
        "its {}-entry feature column (gaussians over distance):",
        feat.len()
    );
    let shown: Vec<String> = feat.iter().map(|x| format!("{x:.3}")).collect();
    println!("  [{}]", shown.join(", "));
    Ok(())
}
