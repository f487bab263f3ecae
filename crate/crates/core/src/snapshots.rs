//! Per-frame graph exports with attached / to-be-detached edge marks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corrnet::TreeFrame;
use crate::error::{Error, Result};
use crate::observables::{rank_order, tree_betweenness};

/// Distinct fill colours for the highest-ranked vertices.
pub const PALETTE: [&str; 13] = [
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45",
    "#fabed4", "#469990", "#dcbeff", "#9a6324",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Dot,
    Graphml,
}

impl GraphFormat {
    pub fn extension(self) -> &'static str {
        match self {
            GraphFormat::Dot => "dot",
            GraphFormat::Graphml => "graphml",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDiff {
    /// Edges of this frame missing from the previous one.
    pub attached: BTreeSet<(usize, usize)>,
    /// Edges of this frame missing from the next one.
    pub to_detach: BTreeSet<(usize, usize)>,
    /// False at the start of a stream: `attached` is then empty by convention.
    pub has_prev: bool,
    pub has_next: bool,
}

fn edge_keys(frame: &TreeFrame) -> BTreeSet<(usize, usize)> {
    frame.edges.iter().map(|e| e.key()).collect()
}

pub fn diff_frames(prev: Option<&TreeFrame>, cur: &TreeFrame, next: Option<&TreeFrame>) -> FrameDiff {
    let here = edge_keys(cur);
    let minus = |other: Option<&TreeFrame>| -> BTreeSet<(usize, usize)> {
        other.map_or_else(BTreeSet::new, |o| here.difference(&edge_keys(o)).copied().collect())
    };
    FrameDiff {
        attached: minus(prev),
        to_detach: minus(next),
        has_prev: prev.is_some(),
        has_next: next.is_some(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    /// How many top-ranked vertices get a palette colour (at most 13).
    pub top: usize,
    /// Node width per unit of degree.
    pub size_per_degree: f64,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            top: 13,
            size_per_degree: 0.1,
        }
    }
}

fn node_colors(ranks: &[usize], top: usize) -> BTreeMap<usize, &'static str> {
    ranks
        .iter()
        .take(top.min(PALETTE.len()))
        .enumerate()
        .map(|(r, v)| (*v, PALETTE[r]))
        .collect()
}

fn edge_color(diff: &FrameDiff, key: (usize, usize)) -> &'static str {
    match (diff.attached.contains(&key), diff.to_detach.contains(&key)) {
        (true, true) => "red:black",
        (true, false) => "red",
        (false, true) => "black",
        (false, false) => "gray",
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT text; `ranks` is the vertex rank order (leader first).
pub fn export_dot(
    frame: &TreeFrame,
    diff: &FrameDiff,
    ranks: &[usize],
    tickers: &[String],
    opts: &ExportOptions,
) -> Result<String> {
    if tickers.len() != frame.n() {
        return Err(Error::Dimension(format!("{} tickers for {} vertices", tickers.len(), frame.n())));
    }
    let colors = node_colors(ranks, opts.top);
    let mut s = String::new();
    writeln!(s, "graph frame_{} {{", frame.frame_index).unwrap();
    writeln!(
        s,
        "  graph [label=\"frame {} {}\"];",
        frame.frame_index,
        escape(&frame.center_date)
    )
    .unwrap();
    writeln!(s, "  node [shape=circle, style=filled, fixedsize=true];").unwrap();
    for (v, name) in tickers.iter().enumerate() {
        let k = frame.degree[v];
        writeln!(
            s,
            "  n{v} [label=\"{}\", degree={k}, width={:.3}, fillcolor=\"{}\"];",
            escape(name),
            opts.size_per_degree * k as f64,
            colors.get(&v).copied().unwrap_or("white"),
        )
        .unwrap();
    }
    let mut edges = frame.edges.clone();
    edges.sort_by_key(|e| e.key());
    for e in &edges {
        let (a, b) = e.key();
        writeln!(
            s,
            "  n{a} -- n{b} [distance={:.6}, color=\"{}\"];",
            e.distance,
            edge_color(diff, (a, b))
        )
        .unwrap();
    }
    s.push_str("}\n");
    Ok(s)
}

/// GraphML with the same attributes as the DOT export.
pub fn export_graphml(
    frame: &TreeFrame,
    diff: &FrameDiff,
    ranks: &[usize],
    tickers: &[String],
    opts: &ExportOptions,
) -> Result<String> {
    if tickers.len() != frame.n() {
        return Err(Error::Dimension(format!("{} tickers for {} vertices", tickers.len(), frame.n())));
    }
    let xml = |s: &str| {
        s.replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;")
            .replace('"', "&quot;")
    };
    let colors = node_colors(ranks, opts.top);
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
    for (id, target, name, ty) in [
        ("label", "node", "label", "string"),
        ("degree", "node", "degree", "int"),
        ("size", "node", "size", "double"),
        ("color", "node", "color", "string"),
        ("distance", "edge", "distance", "double"),
        ("ecolor", "edge", "color", "string"),
    ] {
        writeln!(s, "  <key id=\"{id}\" for=\"{target}\" attr.name=\"{name}\" attr.type=\"{ty}\"/>").unwrap();
    }
    writeln!(s, "  <graph id=\"frame_{}\" edgedefault=\"undirected\">", frame.frame_index).unwrap();
    for (v, name) in tickers.iter().enumerate() {
        let k = frame.degree[v];
        writeln!(
            s,
            "    <node id=\"n{v}\"><data key=\"label\">{}</data><data key=\"degree\">{k}</data><data key=\"size\">{:.3}</data><data key=\"color\">{}</data></node>",
            xml(name),
            opts.size_per_degree * k as f64,
            colors.get(&v).copied().unwrap_or("white"),
        )
        .unwrap();
    }
    let mut edges = frame.edges.clone();
    edges.sort_by_key(|e| e.key());
    for e in &edges {
        let (a, b) = e.key();
        writeln!(
            s,
            "    <edge source=\"n{a}\" target=\"n{b}\"><data key=\"distance\">{:.6}</data><data key=\"ecolor\">{}</data></edge>",
            e.distance,
            edge_color(diff, (a, b))
        )
        .unwrap();
    }
    s.push_str("  </graph>\n</graphml>\n");
    Ok(s)
}

/// Writes `frame_<index>.<ext>` for every frame with index in `[from, to]`.
/// Neighbours for the diff are the frames with index ± 1, when present.
/// Returns the written file names in frame order.
pub fn export_frames(
    frames: &[TreeFrame],
    tickers: &[String],
    dir: &Path,
    range: (usize, usize),
    format: GraphFormat,
    opts: &ExportOptions,
) -> Result<Vec<String>> {
    let by_index: BTreeMap<usize, &TreeFrame> = frames.iter().map(|f| (f.frame_index, f)).collect();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (&idx, &frame) in by_index.range(range.0..=range.1) {
        let prev = idx.checked_sub(1).and_then(|p| by_index.get(&p).copied());
        let next = by_index.get(&(idx + 1)).copied();
        let diff = diff_frames(prev, frame, next);
        let ranks = rank_order(frame, &tree_betweenness(frame));
        let text = match format {
            GraphFormat::Dot => export_dot(frame, &diff, &ranks, tickers, opts)?,
            GraphFormat::Graphml => export_graphml(frame, &diff, &ranks, tickers, opts)?,
        };
        let name = format!("frame_{idx}.{}", format.extension());
        std::fs::write(dir.join(&name), text)?;
        written.push(name);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::tests::{path, star, tree};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("T{i}")).collect()
    }

    fn indexed(mut f: TreeFrame, i: usize) -> TreeFrame {
        f.frame_index = i;
        f
    }

    #[test]
    fn identical_frames_have_empty_diff() {
        let f = path(5);
        let d = diff_frames(Some(&f), &f, Some(&f));
        assert!(d.attached.is_empty() && d.to_detach.is_empty());
        assert!(d.has_prev && d.has_next);
    }

    #[test]
    fn swapped_edge_shows_up_on_both_sides() {
        let a = tree(4, &[(0, 1), (1, 2), (2, 3)]);
        let b = tree(4, &[(0, 1), (1, 2), (1, 3)]);
        let at_b = diff_frames(Some(&a), &b, None);
        assert_eq!(at_b.attached, BTreeSet::from([(1, 3)]));
        assert!(!at_b.has_next && at_b.to_detach.is_empty());
        let at_a = diff_frames(None, &a, Some(&b));
        assert_eq!(at_a.to_detach, BTreeSet::from([(2, 3)]));
        assert!(!at_a.has_prev && at_a.attached.is_empty());
    }

    #[test]
    fn one_frame_edge_is_in_both_sets() {
        let a = path(4);
        let b = tree(4, &[(0, 1), (1, 2), (0, 3)]);
        let d = diff_frames(Some(&a), &b, Some(&a));
        assert_eq!(d.attached, d.to_detach);
        assert_eq!(d.attached, BTreeSet::from([(0, 3)]));
    }

    #[test]
    fn three_node_dot() {
        let f = path(3);
        let ranks = rank_order(&f, &tree_betweenness(&f));
        let text = export_dot(&f, &FrameDiff::default(), &ranks, &names(3), &ExportOptions::default()).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains("label=\"T")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.contains(" -- ")).count(), 2);
        assert_eq!(text, export_dot(&f, &FrameDiff::default(), &ranks, &names(3), &ExportOptions::default()).unwrap());
        assert!(text.contains("n1 [label=\"T1\", degree=2, width=0.200, fillcolor=\"#e6194b\"]"));
    }

    #[test]
    fn leader_is_largest_and_colours_stop_at_top() {
        let f = star(20);
        let ranks = rank_order(&f, &tree_betweenness(&f));
        let opts = ExportOptions::default();
        let text = export_dot(&f, &FrameDiff::default(), &ranks, &names(20), &opts).unwrap();
        assert!(text.contains("n0 [label=\"T0\", degree=19, width=1.900"));
        assert_eq!(text.matches("fillcolor=\"white\"").count(), 20 - 13);
    }

    #[test]
    fn edge_colours_follow_the_diff() {
        let a = tree(4, &[(0, 1), (1, 2), (2, 3)]);
        let b = tree(4, &[(0, 1), (1, 2), (1, 3)]);
        let c = tree(4, &[(0, 1), (0, 2), (1, 3)]);
        let d = diff_frames(Some(&a), &b, Some(&c));
        let ranks = rank_order(&b, &tree_betweenness(&b));
        let text = export_dot(&b, &d, &ranks, &names(4), &ExportOptions::default()).unwrap();
        assert!(text.contains("n1 -- n3 [distance=1.000000, color=\"red\"]"));
        assert!(text.contains("n1 -- n2 [distance=1.000000, color=\"black\"]"));
        assert!(text.contains("n0 -- n1 [distance=1.000000, color=\"gray\"]"));
    }

    #[test]
    fn graphml_has_all_nodes_and_edges() {
        let f = star(5);
        let ranks = rank_order(&f, &tree_betweenness(&f));
        let text = export_graphml(&f, &FrameDiff::default(), &ranks, &names(5), &ExportOptions::default()).unwrap();
        assert_eq!(text.matches("<node ").count(), 5);
        assert_eq!(text.matches("<edge ").count(), 4);
    }

    #[test]
    fn frames_are_written_with_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![
            indexed(path(6), 10),
            indexed(star(6), 11),
            indexed(tree(6, &[(0, 1), (0, 2), (0, 3), (3, 4), (3, 5)]), 12),
        ];
        let files = export_frames(&frames, &names(6), dir.path(), (11, 20), GraphFormat::Dot, &ExportOptions::default()).unwrap();
        assert_eq!(files, vec!["frame_11.dot", "frame_12.dot"]);
        let first = std::fs::read(dir.path().join("frame_11.dot")).unwrap();
        export_frames(&frames, &names(6), dir.path(), (11, 20), GraphFormat::Dot, &ExportOptions::default()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("frame_11.dot")).unwrap());
        let text = String::from_utf8(first).unwrap();
        assert_eq!(text.matches(" -- ").count(), 5);
        assert!(text.contains("color=\"red\""));
    }
}
