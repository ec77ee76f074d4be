//! Graph file format.
//!
//! A textual header, one `key value...` pair per line, ended by a `data` line:
//!
//! ```text
//! PLANET-GRAPH 1
//! nodes 3
//! edges 2
//! modalities 2
//! names text image
//! dims 4 6
//! anchor 0
//! classes 0
//! node_splits 0
//! edge_splits 0
//! data
//! ```
//!
//! followed by binary sections, all little-endian: each feature matrix in
//! modality order (`nodes × dim` f64, row-major), the edge list (`edges` u32
//! pairs), labels (`nodes` u32) when `classes > 0`, then one split byte per
//! node and per edge when the matching flag is 1.

use std::io::Write;
use std::path::Path;

use super::{DataError, Modality, MultimodalGraph, Split};
use crate::numerics::Tensor;

const MAGIC_LINE: &str = "PLANET-GRAPH 1";

pub fn graph_to_bytes(g: &MultimodalGraph) -> Vec<u8> {
    let mut out = Vec::new();
    let names: Vec<&str> = g.modalities().iter().map(|m| m.name.as_str()).collect();
    let dims: Vec<String> = g.modalities().iter().map(|m| m.dim.to_string()).collect();
    let classes = g.labels().map_or(0, |l| l.num_classes);
    let header = format!(
        "{MAGIC_LINE}\nnodes {}\nedges {}\nmodalities {}\nnames {}\ndims {}\nanchor {}\nclasses {}\nnode_splits {}\nedge_splits {}\ndata\n",
        g.num_nodes(),
        g.num_edges(),
        g.num_modalities(),
        names.join(" "),
        dims.join(" "),
        g.anchor(),
        classes,
        u8::from(g.node_splits().is_some()),
        u8::from(g.edge_splits().is_some()),
    );
    out.extend_from_slice(header.as_bytes());
    for x in g.features() {
        for v in x.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &(u, v) in g.edges() {
        out.extend_from_slice(&(u as u32).to_le_bytes());
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    if let Some(l) = g.labels() {
        for &y in &l.values {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
    }
    if let Some(s) = g.node_splits() {
        out.extend(s.iter().map(|s| s.code()));
    }
    if let Some(s) = g.edge_splits() {
        out.extend(s.iter().map(|s| s.code()));
    }
    out
}

struct Header {
    nodes: usize,
    edges: usize,
    names: Vec<String>,
    dims: Vec<usize>,
    anchor: usize,
    classes: usize,
    node_splits: bool,
    edge_splits: bool,
}

fn parse_header(text: &str) -> Result<Header, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MAGIC_LINE => {}
        _ => return Err(DataError::Record { record: "header line 0".into(), msg: "missing magic".into() }),
    }
    let mut fields = std::collections::BTreeMap::new();
    for (i, line) in lines {
        let mut parts = line.splitn(2, ' ');
        let key = parts.next().unwrap_or_default();
        if fields.insert(key.to_string(), (i, parts.next().unwrap_or("").to_string())).is_some() {
            return Err(DataError::Record { record: format!("header line {i}"), msg: format!("repeated key {key}") });
        }
    }
    let get = |key: &str| {
        fields.get(key).cloned().ok_or_else(|| DataError::Record {
            record: "header".into(),
            msg: format!("missing key {key}"),
        })
    };
    let num = |key: &str| -> Result<usize, DataError> {
        let (i, v) = get(key)?;
        v.trim().parse().map_err(|_| DataError::Record {
            record: format!("header line {i}"),
            msg: format!("{key} is not a non-negative integer: {v:?}"),
        })
    };
    let flag = |key: &str| -> Result<bool, DataError> {
        match num(key)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(DataError::Record { record: format!("header key {key}"), msg: format!("flag {other}") }),
        }
    };
    let modalities = num("modalities")?;
    let names: Vec<String> = get("names")?.1.split_whitespace().map(str::to_string).collect();
    let (dims_line, dims_text) = get("dims")?;
    let dims = dims_text
        .split_whitespace()
        .map(|d| d.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| DataError::Record { record: format!("header line {dims_line}"), msg: "bad dims".into() })?;
    if names.len() != modalities || dims.len() != modalities {
        return Err(DataError::Record {
            record: "header".into(),
            msg: format!("{modalities} modalities but {} names and {} dims", names.len(), dims.len()),
        });
    }
    Ok(Header {
        nodes: num("nodes")?,
        edges: num("edges")?,
        names,
        dims,
        anchor: num("anchor")?,
        classes: num("classes")?,
        node_splits: flag("node_splits")?,
        edge_splits: flag("edge_splits")?,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.bytes.len() < n {
            return Err(DataError::Record { record: what.to_string(), msg: "truncated".into() });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn graph_from_bytes(bytes: &[u8]) -> Result<MultimodalGraph, DataError> {
    const END: &[u8] = b"\ndata\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| DataError::Record { record: "header".into(), msg: "no data marker".into() })?;
    let text = std::str::from_utf8(&bytes[..split])
        .map_err(|_| DataError::Record { record: "header".into(), msg: "not UTF-8".into() })?;
    let h = parse_header(text)?;
    let mut cur = Cursor { bytes: &bytes[split + END.len()..] };

    let mut features = Vec::with_capacity(h.dims.len());
    for (m, &d) in h.dims.iter().enumerate() {
        let raw = cur.take(h.nodes * d * 8, &format!("features[{m}]"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        features.push(Tensor::matrix(h.nodes, d, data).expect("sized above"));
    }
    let mut edges = Vec::with_capacity(h.edges);
    for i in 0..h.edges {
        let what = format!("edge {i}");
        let u = cur.u32(&what)? as usize;
        let v = cur.u32(&what)? as usize;
        edges.push((u, v));
    }
    let modalities = h.names.iter().zip(&h.dims).map(|(n, &d)| Modality::new(n.clone(), d)).collect();
    let mut g = MultimodalGraph::new(h.nodes, edges, modalities, h.anchor, features)?;
    if h.classes > 0 {
        let mut labels = Vec::with_capacity(h.nodes);
        for i in 0..h.nodes {
            labels.push(cur.u32(&format!("label {i}"))? as usize);
        }
        g = g.with_labels(labels, h.classes)?;
    }
    let read_splits = |cur: &mut Cursor, n: usize, what: &str| -> Result<Vec<Split>, DataError> {
        cur.take(n, what)?
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Split::from_code(c).ok_or_else(|| DataError::Record {
                    record: format!("{what} {i}"),
                    msg: format!("split code {c}"),
                })
            })
            .collect()
    };
    if h.node_splits {
        g = g.with_node_splits(read_splits(&mut cur, h.nodes, "node split")?)?;
    }
    if h.edge_splits {
        g = g.with_edge_splits(read_splits(&mut cur, h.edges, "edge split")?)?;
    }
    if !cur.bytes.is_empty() {
        return Err(DataError::Record { record: "trailer".into(), msg: format!("{} unexpected bytes", cur.bytes.len()) });
    }
    Ok(g)
}

pub fn save_graph(g: &MultimodalGraph, path: &Path) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&graph_to_bytes(g)).map_err(|e| DataError::io(path, e))
}

pub fn load_graph(path: &Path) -> Result<MultimodalGraph, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    graph_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph() -> MultimodalGraph {
        let text = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let image = Tensor::matrix(3, 6, (0..18).map(|i| (i as f64).sin()).collect()).unwrap();
        MultimodalGraph::new(
            3,
            vec![(0, 1), (1, 2)],
            vec![Modality::new("text", 4), Modality::new("image", 6)],
            0,
            vec![text, image],
        )
        .unwrap()
    }

    #[test]
    fn empty_graph_round_trips() {
        let g = MultimodalGraph::new(
            0,
            vec![],
            vec![Modality::new("text", 3), Modality::new("image", 2)],
            0,
            vec![Tensor::zeros(&[0, 3]), Tensor::zeros(&[0, 2])],
        )
        .unwrap();
        assert_eq!(graph_from_bytes(&graph_to_bytes(&g)).unwrap(), g);
    }

    #[test]
    fn path_graph_round_trips_with_labels_and_splits() {
        let g = path_graph()
            .with_labels(vec![0, 1, 1], 2)
            .unwrap()
            .with_node_splits(vec![Split::Train, Split::Val, Split::Test])
            .unwrap()
            .with_edge_splits(vec![Split::Train, Split::Test])
            .unwrap();
        let back = graph_from_bytes(&graph_to_bytes(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn out_of_range_edge_names_its_index() {
        let mut bytes = graph_to_bytes(&path_graph());
        // Second edge's target is the last u32 of the edge section.
        let edge_end = bytes.len();
        bytes[edge_end - 4..].copy_from_slice(&7u32.to_le_bytes());
        let err = graph_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("edge 1"), "{err}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]
        #[test]
        fn random_graphs_round_trip_bit_exactly(
            n in 0usize..12,
            d in proptest::collection::vec(0usize..5, 1..4),
            raw_edges in proptest::collection::vec((0usize..12, 0usize..12), 0..30),
            values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 200),
            labelled in proptest::bool::ANY,
        ) {
            let mut seen = std::collections::BTreeSet::new();
            let edges: Vec<(usize, usize)> = raw_edges
                .into_iter()
                .filter(|&(u, v)| u < n && v < n && u != v && seen.insert((u.min(v), u.max(v))))
                .collect();
            let mut k = 0;
            let features: Vec<Tensor> = d
                .iter()
                .map(|&dim| {
                    let data = (0..n * dim).map(|_| { k += 1; values[k % values.len()] }).collect();
                    Tensor::matrix(n, dim, data).unwrap()
                })
                .collect();
            let modalities = d.iter().enumerate().map(|(i, &dim)| Modality::new(format!("m{i}"), dim)).collect();
            let m = edges.len();
            let mut g = MultimodalGraph::new(n, edges, modalities, d.len() - 1, features).unwrap();
            if labelled {
                g = g
                    .with_labels((0..n).map(|i| i % 3).collect(), 3).unwrap()
                    .with_node_splits((0..n).map(|i| Split::from_code((i % 4) as u8).unwrap()).collect()).unwrap()
                    .with_edge_splits(vec![Split::Train; m]).unwrap();
            }
            let back = graph_from_bytes(&graph_to_bytes(&g)).unwrap();
            proptest::prop_assert_eq!(graph_to_bytes(&back), graph_to_bytes(&g));
            proptest::prop_assert_eq!(back, g);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        let g = path_graph();
        save_graph(&g, &path).unwrap();
        assert_eq!(load_graph(&path).unwrap(), g);
        assert!(matches!(load_graph(&dir.path().join("missing")), Err(DataError::Io { .. })));
    }

    #[test]
    fn malformed_header_is_rejected() {
        assert!(graph_from_bytes(b"PLANET-GRAPH 1\nnodes x\ndata\n").is_err());
        assert!(graph_from_bytes(b"GRAPH\ndata\n").is_err());
        let mut bytes = graph_to_bytes(&path_graph());
        bytes.truncate(bytes.len() - 3);
        assert!(graph_from_bytes(&bytes).is_err());
    }
}
