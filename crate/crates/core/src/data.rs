//! Dataset ingestion and the on-disk stream layout.
//!
//! Input formats:
//!   - triple files: one `head<TAB>relation<TAB>tail` line per triple,
//!     UTF-8 names; dense ids are assigned in first-appearance order
//!     and recorded in sidecar dictionaries (`name<TAB>id`).
//!   - citation graphs: node file `id<TAB>label<TAB>f1,f2,...`,
//!     edge file `id<TAB>id`.
//!
//! A split stream is saved as a directory: `stream.json` metadata,
//! dictionaries, one `part_<i>/` directory per part with TSV splits,
//! a feature table for node-classification data, and a cumulative
//! statistics table.

use crate::error::{Error, Result};
use crate::graph::{GraphPart, LabeledNode, StreamDataset, StreamMode, Triple};
use crate::num::Real;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Parsed triple dataset with its name tables.
#[derive(Debug, Clone, PartialEq)]
pub struct RawKg {
    pub triples: Vec<Triple>,
    pub node_names: Vec<String>,
    pub relation_names: Vec<String>,
}

/// Parsed citation graph. Edges carry the single relation id 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCitation<T> {
    pub edges: Vec<Triple>,
    pub features: Vec<Vec<T>>,
    pub labels: Vec<u32>,
    pub node_names: Vec<String>,
    pub label_names: Vec<String>,
}

fn intern(name: &str, table: &mut Vec<String>, index: &mut HashMap<String, u32>) -> u32 {
    if let Some(&id) = index.get(name) {
        return id;
    }
    let id = table.len() as u32;
    table.push(name.to_string());
    index.insert(name.to_string(), id);
    id
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Reads a `head<TAB>relation<TAB>tail` file, assigning dense ids in
/// first-appearance order.
pub fn read_triple_file(path: &Path) -> Result<RawKg> {
    let text = read_to_string(path)?;
    let mut triples = Vec::new();
    let mut node_names = Vec::new();
    let mut relation_names = Vec::new();
    let mut node_index = HashMap::new();
    let mut relation_index = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (h, r, t) = match (cols.next(), cols.next(), cols.next(), cols.next()) {
            (Some(h), Some(r), Some(t), None) => (h, r, t),
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: expected head<TAB>relation<TAB>tail",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        let head = intern(h, &mut node_names, &mut node_index);
        let relation = intern(r, &mut relation_names, &mut relation_index);
        let tail = intern(t, &mut node_names, &mut node_index);
        triples.push(Triple::new(head, relation, tail));
    }
    if triples.is_empty() {
        return Err(Error::Data(format!("{} contains no triples", path.display())));
    }
    Ok(RawKg { triples, node_names, relation_names })
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn triples_to_tsv(triples: &[Triple], nodes: &[String], relations: &[String]) -> String {
    let mut out = String::new();
    for t in triples {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            nodes[t.head as usize], relations[t.relation as usize], nodes[t.tail as usize]
        );
    }
    out
}

fn dict_to_tsv(names: &[String]) -> String {
    let mut out = String::new();
    for (id, name) in names.iter().enumerate() {
        let _ = writeln!(out, "{name}\t{id}");
    }
    out
}

fn read_dict(path: &Path) -> Result<Vec<String>> {
    let text = read_to_string(path)?;
    let mut names = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, id) = line.rsplit_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected name<TAB>id", path.display(), lineno + 1))
        })?;
        let id: usize = id.parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad id {id}", path.display(), lineno + 1))
        })?;
        if id != names.len() {
            return Err(Error::Data(format!(
                "{}:{}: ids must be dense and ascending",
                path.display(),
                lineno + 1
            )));
        }
        names.push(name.to_string());
    }
    Ok(names)
}

/// Reads citation node and edge files. Class ids follow the labels'
/// first appearance in the node file.
pub fn read_citation_files<T: Real>(node_path: &Path, edge_path: &Path) -> Result<RawCitation<T>> {
    let text = read_to_string(node_path)?;
    let mut node_names = Vec::new();
    let mut node_index = HashMap::new();
    let mut label_names = Vec::new();
    let mut label_index = HashMap::new();
    let mut features: Vec<Vec<T>> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected id<TAB>label<TAB>f1,f2,...",
                node_path.display(),
                lineno + 1
            )));
        }
        if node_index.contains_key(cols[0]) {
            return Err(Error::Data(format!(
                "{}:{}: duplicate node id {}",
                node_path.display(),
                lineno + 1,
                cols[0]
            )));
        }
        intern(cols[0], &mut node_names, &mut node_index);
        labels.push(intern(cols[1], &mut label_names, &mut label_index));
        let row: Vec<T> = cols[2]
            .split(',')
            .map(|f| {
                f.parse::<f64>().map(T::from_f64_c).map_err(|_| {
                    Error::Data(format!(
                        "{}:{}: bad feature value {f}",
                        node_path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = features.first() {
            if first.len() != row.len() {
                return Err(Error::Data(format!(
                    "{}:{}: feature length {} differs from {}",
                    node_path.display(),
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        features.push(row);
    }
    if features.is_empty() {
        return Err(Error::Data(format!("{} contains no nodes", node_path.display())));
    }

    let text = read_to_string(edge_path)?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (a, b) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected id<TAB>id", edge_path.display(), lineno + 1))
        })?;
        let resolve = |name: &str| {
            node_index.get(name).copied().ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: unknown node id {name}",
                    edge_path.display(),
                    lineno + 1
                ))
            })
        };
        edges.push(Triple::new(resolve(a)?, 0, resolve(b)?));
    }
    Ok(RawCitation { edges, features, labels, node_names, label_names })
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamMeta {
    mode: StreamMode,
    parts: usize,
    node_count: usize,
    relation_count: usize,
    num_classes: usize,
}

fn labeled_nodes_to_tsv(nodes: &[LabeledNode], names: &[String], labels: &[String]) -> String {
    let mut out = String::new();
    for ln in nodes {
        let _ = writeln!(out, "{}\t{}", names[ln.node as usize], labels[ln.label as usize]);
    }
    out
}

fn format_real<T: Real>(x: T) -> String {
    format!("{x}")
}

/// Cumulative per-part counts in the accumulated-statistics style:
/// entities and relations seen so far plus the part's split sizes.
pub fn statistics_table<T: Real>(dataset: &StreamDataset<T>) -> String {
    let mut out = String::from("part\tentities\trelations\ttrain\tvalidation\tquery\n");
    for (i, part) in dataset.parts.iter().enumerate() {
        let entities = dataset.seen_entities(i).len();
        let mut relations = std::collections::BTreeSet::new();
        for p in &dataset.parts[..=i] {
            relations.extend(p.all_triples().map(|t| t.relation));
        }
        let (train, validation, query) = if dataset.mode == StreamMode::LinkPrediction {
            (part.train.len(), part.validation.len(), part.query.len())
        } else {
            (part.train_nodes.len(), part.validation_nodes.len(), part.query_nodes.len())
        };
        let _ = writeln!(
            out,
            "{i}\t{entities}\t{}\t{train}\t{validation}\t{query}",
            relations.len()
        );
    }
    out
}

/// Writes a split stream as a directory tree (see module docs).
pub fn save_stream<T: Real>(dir: &Path, dataset: &StreamDataset<T>) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
    let meta = StreamMeta {
        mode: dataset.mode,
        parts: dataset.parts.len(),
        node_count: dataset.node_count,
        relation_count: dataset.relation_count,
        num_classes: dataset.num_classes,
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Data(format!("metadata serialization failed: {e}")))?;
    write_file(&dir.join("stream.json"), &meta_json)?;
    write_file(&dir.join("entities.dict"), &dict_to_tsv(&dataset.node_names))?;
    write_file(&dir.join("relations.dict"), &dict_to_tsv(&dataset.relation_names))?;

    let label_names: Vec<String> =
        (0..dataset.num_classes).map(|c| format!("class_{c}")).collect();
    if dataset.mode == StreamMode::NodeClassification {
        write_file(&dir.join("labels.dict"), &dict_to_tsv(&label_names))?;
        let features = dataset
            .node_features
            .as_ref()
            .ok_or_else(|| Error::Data("node-classification stream lacks features".into()))?;
        let mut table = String::new();
        for (u, row) in features.iter().enumerate() {
            let joined: Vec<String> = row.iter().map(|&x| format_real(x)).collect();
            let _ = writeln!(table, "{}\t{}", dataset.node_names[u], joined.join(","));
        }
        write_file(&dir.join("features.tsv"), &table)?;
    }

    for part in &dataset.parts {
        let pdir = dir.join(format!("part_{}", part.index));
        fs::create_dir_all(&pdir)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", pdir.display())))?;
        let names = &dataset.node_names;
        let rels = &dataset.relation_names;
        write_file(&pdir.join("train.tsv"), &triples_to_tsv(&part.train, names, rels))?;
        write_file(&pdir.join("validation.tsv"), &triples_to_tsv(&part.validation, names, rels))?;
        write_file(&pdir.join("query.tsv"), &triples_to_tsv(&part.query, names, rels))?;
        if dataset.mode == StreamMode::NodeClassification {
            write_file(
                &pdir.join("train_nodes.tsv"),
                &labeled_nodes_to_tsv(&part.train_nodes, names, &label_names),
            )?;
            write_file(
                &pdir.join("validation_nodes.tsv"),
                &labeled_nodes_to_tsv(&part.validation_nodes, names, &label_names),
            )?;
            write_file(
                &pdir.join("query_nodes.tsv"),
                &labeled_nodes_to_tsv(&part.query_nodes, names, &label_names),
            )?;
        }
    }
    write_file(&dir.join("statistics.tsv"), &statistics_table(dataset))
}

fn parse_triples(
    path: &Path,
    node_index: &HashMap<String, u32>,
    relation_index: &HashMap<String, u32>,
) -> Result<Vec<Triple>> {
    let text = read_to_string(path)?;
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected head<TAB>relation<TAB>tail",
                path.display(),
                lineno + 1
            )));
        }
        let lookup = |idx: &HashMap<String, u32>, name: &str| {
            idx.get(name).copied().ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: name {name} missing from dictionary",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        triples.push(Triple::new(
            lookup(node_index, cols[0])?,
            lookup(relation_index, cols[1])?,
            lookup(node_index, cols[2])?,
        ));
    }
    Ok(triples)
}

fn parse_labeled_nodes(
    path: &Path,
    node_index: &HashMap<String, u32>,
    label_index: &HashMap<String, u32>,
) -> Result<Vec<LabeledNode>> {
    let text = read_to_string(path)?;
    let mut nodes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, label) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected node<TAB>label", path.display(), lineno + 1))
        })?;
        let resolve = |idx: &HashMap<String, u32>, key: &str| {
            idx.get(key).copied().ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: name {key} missing from dictionary",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        nodes.push(LabeledNode { node: resolve(node_index, name)?, label: resolve(label_index, label)? });
    }
    Ok(nodes)
}

/// Loads a stream directory written by [`save_stream`].
pub fn load_stream<T: Real>(dir: &Path) -> Result<StreamDataset<T>> {
    let meta_text = read_to_string(&dir.join("stream.json"))?;
    let meta: StreamMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Data(format!("bad stream metadata: {e}")))?;
    let node_names = read_dict(&dir.join("entities.dict"))?;
    let relation_names = read_dict(&dir.join("relations.dict"))?;
    let node_index: HashMap<String, u32> =
        node_names.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
    let relation_index: HashMap<String, u32> =
        relation_names.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();

    let mut node_features = None;
    let mut node_labels = None;
    let mut label_index = HashMap::new();
    if meta.mode == StreamMode::NodeClassification {
        let label_names = read_dict(&dir.join("labels.dict"))?;
        label_index = label_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        let text = read_to_string(&dir.join("features.tsv"))?;
        let mut features = vec![Vec::new(); node_names.len()];
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (name, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("features.tsv:{}: expected node<TAB>values", lineno + 1))
            })?;
            let u = *node_index.get(name).ok_or_else(|| {
                Error::Data(format!("features.tsv:{}: unknown node {name}", lineno + 1))
            })?;
            features[u as usize] = rest
                .split(',')
                .map(|f| {
                    f.parse::<f64>().map(T::from_f64_c).map_err(|_| {
                        Error::Data(format!("features.tsv:{}: bad value {f}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
        }
        node_features = Some(features);
    }

    let mut parts = Vec::with_capacity(meta.parts);
    for index in 0..meta.parts {
        let pdir = dir.join(format!("part_{index}"));
        let mut part = GraphPart::empty(index);
        part.train = parse_triples(&pdir.join("train.tsv"), &node_index, &relation_index)?;
        part.validation =
            parse_triples(&pdir.join("validation.tsv"), &node_index, &relation_index)?;
        part.query = parse_triples(&pdir.join("query.tsv"), &node_index, &relation_index)?;
        if meta.mode == StreamMode::NodeClassification {
            part.train_nodes =
                parse_labeled_nodes(&pdir.join("train_nodes.tsv"), &node_index, &label_index)?;
            part.validation_nodes = parse_labeled_nodes(
                &pdir.join("validation_nodes.tsv"),
                &node_index,
                &label_index,
            )?;
            part.query_nodes =
                parse_labeled_nodes(&pdir.join("query_nodes.tsv"), &node_index, &label_index)?;
        }
        parts.push(part);
    }
    if meta.mode == StreamMode::NodeClassification {
        let mut labels = vec![0u32; node_names.len()];
        for part in &parts {
            for ln in part
                .train_nodes
                .iter()
                .chain(&part.validation_nodes)
                .chain(&part.query_nodes)
            {
                labels[ln.node as usize] = ln.label;
            }
        }
        node_labels = Some(labels);
    }
    Ok(StreamDataset {
        mode: meta.mode,
        parts,
        node_count: meta.node_count,
        relation_count: meta.relation_count,
        node_names,
        relation_names,
        node_features,
        node_labels,
        num_classes: meta.num_classes,
    })
}
