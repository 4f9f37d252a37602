//! Compares path length and clustering of a ring lattice with the same
//! lattice after a handful of long-range shortcuts are added.

use mcastsim::overlay::OverlayGraph;

fn ring(n: usize, k: usize) -> OverlayGraph {
    let mut g = OverlayGraph::new(n);
    for i in 0..n {
        for j in 1..=k {
            g.add_edge(i, (i + j) % n);
        }
    }
    g
}

fn main() {
    let n = 400;
    let base = ring(n, 3);
    let mut short = base.clone();
    for i in (0..n).step_by(40) {
        short.add_edge(i, (i + n / 2 + 7) % n);
    }
    for (name, g) in [("ring lattice", &base), ("with shortcuts", &short)] {
        let st = g.stats(1000, 500, 1);
        println!(
            "{name:<15} edges {:>5}  L = {:>6.2}  C = {:.3}  component {}",
            st.edges, st.avg_path_length, st.clustering, st.component_size
        );
    }
}
