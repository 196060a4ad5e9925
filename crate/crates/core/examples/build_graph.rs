//! Builds the heterogeneous graph for a speaker sequence and prints its
//! super-edges and the per-meta-path edge counts.
//!
//! cargo run --example build_graph -- [K] [speaker ...]
//! e.g. `cargo run --example build_graph -- 1 A B A B`

use std::collections::BTreeMap;

use m3hg::graph::{build_super_graph, expand_super_edges};

fn main() -> m3hg::Result<()> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);
    let mut speakers: Vec<String> = args.collect();
    if speakers.is_empty() {
        speakers = ["A", "B", "A", "B", "C"].map(String::from).to_vec();
    }

    let mut g = build_super_graph(&speakers, k)?;
    println!("speakers {:?}, K = {k}", speakers);
    println!("{} nodes, {} super-edges", g.node_count(), g.super_edges.len());
    for e in &g.super_edges {
        let arrow = if e.bidirectional { "<->" } else { "->" };
        println!("  {:<4} {arrow:<3} {:<4} {}", e.src.to_string(), e.dst.to_string(), e.relation.as_str());
    }

    expand_super_edges(&mut g);
    let mut per_label: BTreeMap<String, usize> = BTreeMap::new();
    for e in &g.edges {
        *per_label.entry(e.label.code()).or_default() += 1;
    }
    println!("{} expanded edges over {} meta-paths", g.edges.len(), per_label.len());
    for (label, count) in per_label {
        println!("  {label:<10} {count}");
    }
    Ok(())
}
