//! Multimodal graph data model, on-disk dataset format and the synthetic
//! modality-confusion generator.
//!
//! A dataset directory holds:
//!
//! * `manifest.json`: node count, ordered modalities, optional class count,
//!   file map and optional seed;
//! * `edges.csv`: one `u,v` per line, 0-based, `u < v`;
//! * `features_<name>.bin`: magic `NSGF`, `u32` rows, `u32` cols (both
//!   little-endian), then `rows * cols` little-endian `f32` in row-major order;
//! * `labels.csv` (optional): one class index per line;
//! * `splits.json` (optional): train/val/test index sets.
//!
//! Values are held as `f64` in memory and written as `f32`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NsgError, Result};
use crate::numerics::Tensor2;
use crate::rng;

pub const FEATURE_MAGIC: &[u8; 4] = b"NSGF";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Indices are node ids.
    Node,
    /// Indices point into the edge list.
    Edge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub kind: SplitKind,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Undirected graph whose nodes carry one feature vector per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalGraph {
    pub num_nodes: usize,
    /// Canonical `(min, max)` pairs, each stored once.
    pub edges: Vec<(usize, usize)>,
    pub modalities: Vec<Modality>,
    /// One `num_nodes x dim` matrix per modality.
    pub features: Vec<Tensor2>,
    pub num_classes: Option<usize>,
    pub labels: Option<Vec<usize>>,
    pub splits: Option<Splits>,
    pub seed: Option<u64>,
}

impl MultimodalGraph {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.dim).collect()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if self.modalities.is_empty() {
            return Err(NsgError::InvalidGraph("no modalities".into()));
        }
        if self.features.len() != self.modalities.len() {
            return Err(NsgError::DimensionMismatch {
                context: "feature matrix count".into(),
                expected: self.modalities.len(),
                found: self.features.len(),
            });
        }
        for (m, f) in self.modalities.iter().zip(&self.features) {
            if f.rows() != n {
                return Err(NsgError::DimensionMismatch {
                    context: format!("rows of modality {}", m.name),
                    expected: n,
                    found: f.rows(),
                });
            }
            if f.cols() != m.dim {
                return Err(NsgError::DimensionMismatch {
                    context: format!("cols of modality {}", m.name),
                    expected: m.dim,
                    found: f.cols(),
                });
            }
        }
        let mut seen = HashSet::with_capacity(self.edges.len());
        for (k, &(u, v)) in self.edges.iter().enumerate() {
            if u == v {
                return Err(NsgError::SelfLoop {
                    file: "edge list".into(),
                    line: k + 1,
                });
            }
            if u >= n || v >= n {
                return Err(NsgError::InvalidGraph(format!(
                    "edge ({u},{v}) out of range for {n} nodes"
                )));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(NsgError::DuplicateEdge {
                    file: "edge list".into(),
                    line: k + 1,
                    u,
                    v,
                });
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(NsgError::DimensionMismatch {
                    context: "label count".into(),
                    expected: n,
                    found: labels.len(),
                });
            }
            let c = self.num_classes.ok_or_else(|| {
                NsgError::InvalidGraph("labels present without num_classes".into())
            })?;
            if let Some(bad) = labels.iter().find(|&&l| l >= c) {
                return Err(NsgError::InvalidGraph(format!(
                    "label {bad} out of range for {c} classes"
                )));
            }
        }
        if let Some(s) = &self.splits {
            let bound = match s.kind {
                SplitKind::Node => n,
                SplitKind::Edge => self.edges.len(),
            };
            let mut all = HashSet::new();
            for &i in s.train.iter().chain(&s.val).chain(&s.test) {
                if i >= bound {
                    return Err(NsgError::InvalidGraph(format!(
                        "split index {i} out of range {bound}"
                    )));
                }
                if !all.insert(i) {
                    return Err(NsgError::InvalidGraph(format!(
                        "split index {i} appears in more than one split"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonicalises edge orientation to `(min, max)` and sorts.
    pub fn canonicalize_edges(&mut self) {
        for e in &mut self.edges {
            *e = (e.0.min(e.1), e.0.max(e.1));
        }
    }

    /// Column-wise concatenation of all modality features.
    pub fn concatenated_features(&self) -> Tensor2 {
        let refs: Vec<&Tensor2> = self.features.iter().collect();
        Tensor2::concat_cols(&refs).expect("validated feature rows")
    }

    /// Neighbour lists of the undirected graph.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        adjacency_lists(self.num_nodes, &self.edges)
    }

    /// 64-bit FNV-1a digest over the canonical content, used to tag runs.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(&(self.num_nodes as u64).to_le_bytes());
        for &(u, v) in &self.edges {
            h.write(&(u as u64).to_le_bytes());
            h.write(&(v as u64).to_le_bytes());
        }
        for (m, f) in self.modalities.iter().zip(&self.features) {
            h.write(m.name.as_bytes());
            h.write(&(m.dim as u64).to_le_bytes());
            for &x in f.data() {
                h.write(&(x as f32).to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                h.write(&(l as u64).to_le_bytes());
            }
        }
        h.finish()
    }
}

pub fn adjacency_lists(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    adj
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileMap {
    edges: String,
    features: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    num_nodes: usize,
    modalities: Vec<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    files: FileMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| NsgError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| NsgError::io(path, e))
}

pub fn write_feature_file(path: &Path, t: &Tensor2) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * t.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &x in t.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_bytes(path, &buf)
}

pub fn read_feature_file(path: &Path) -> Result<Tensor2> {
    let bytes = fs::read(path).map_err(|e| NsgError::io(path, e))?;
    let name = path.display().to_string();
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(NsgError::format(name, "missing NSGF header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != rows * cols * 4 {
        return Err(NsgError::format(
            name,
            format!(
                "payload holds {} bytes, header declares {rows}x{cols}",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor2::from_vec(rows, cols, data)
}

fn parse_edges(text: &str, file: &str, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.map(str::trim)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| NsgError::format(file, format!("bad edge at line {lineno}")))
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(NsgError::format(file, format!("extra field at line {lineno}")));
        }
        if u == v {
            return Err(NsgError::SelfLoop {
                file: file.into(),
                line: lineno,
            });
        }
        if u >= n || v >= n {
            return Err(NsgError::format(
                file,
                format!("node index out of range at line {lineno}"),
            ));
        }
        let e = (u.min(v), u.max(v));
        if !seen.insert(e) {
            return Err(NsgError::DuplicateEdge {
                file: file.into(),
                line: lineno,
                u,
                v,
            });
        }
        edges.push(e);
    }
    Ok(edges)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<MultimodalGraph> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read_string(&manifest_path)?)
        .map_err(|e| NsgError::json("manifest.json", e))?;
    let n = manifest.num_nodes;

    let edges_text = read_string(&dir.join(&manifest.files.edges))?;
    let edges = parse_edges(&edges_text, &manifest.files.edges, n)?;

    let mut features = Vec::with_capacity(manifest.modalities.len());
    for m in &manifest.modalities {
        let file = manifest
            .files
            .features
            .get(&m.name)
            .ok_or_else(|| NsgError::format("manifest.json", format!("no file for modality {}", m.name)))?;
        let t = read_feature_file(&dir.join(file))?;
        if t.rows() != n {
            return Err(NsgError::DimensionMismatch {
                context: format!("{file} rows vs manifest num_nodes"),
                expected: n,
                found: t.rows(),
            });
        }
        if t.cols() != m.dim {
            return Err(NsgError::DimensionMismatch {
                context: format!("{file} cols vs manifest dim"),
                expected: m.dim,
                found: t.cols(),
            });
        }
        features.push(t);
    }

    let labels = match &manifest.files.labels {
        None => None,
        Some(file) => {
            let text = read_string(&dir.join(file))?;
            let mut labels = Vec::with_capacity(n);
            for (k, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                labels.push(line.parse().map_err(|_| {
                    NsgError::format(file.as_str(), format!("bad label at line {}", k + 1))
                })?);
            }
            Some(labels)
        }
    };

    let splits = match &manifest.files.splits {
        None => None,
        Some(file) => Some(
            serde_json::from_str(&read_string(&dir.join(file))?)
                .map_err(|e| NsgError::json(file.as_str(), e))?,
        ),
    };

    let g = MultimodalGraph {
        num_nodes: n,
        edges,
        modalities: manifest.modalities,
        features,
        num_classes: manifest.num_classes,
        labels,
        splits,
        seed: manifest.seed,
    };
    g.validate()?;
    Ok(g)
}

/// Writes `g` as a dataset directory, creating it if needed.
pub fn save_dataset(g: &MultimodalGraph, dir: &Path) -> Result<()> {
    g.validate()?;
    fs::create_dir_all(dir).map_err(|e| NsgError::io(dir, e))?;

    let mut edges = Vec::new();
    for &(u, v) in &g.edges {
        writeln!(edges, "{},{}", u.min(v), u.max(v)).expect("write to vec");
    }
    write_bytes(&dir.join("edges.csv"), &edges)?;

    let mut feature_files = BTreeMap::new();
    for (m, f) in g.modalities.iter().zip(&g.features) {
        let file = format!("features_{}.bin", m.name);
        write_feature_file(&dir.join(&file), f)?;
        feature_files.insert(m.name.clone(), file);
    }

    let labels = match &g.labels {
        None => None,
        Some(labels) => {
            let mut buf = Vec::new();
            for l in labels {
                writeln!(buf, "{l}").expect("write to vec");
            }
            write_bytes(&dir.join("labels.csv"), &buf)?;
            Some("labels.csv".to_string())
        }
    };

    let splits = match &g.splits {
        None => None,
        Some(s) => {
            let text = serde_json::to_string_pretty(s).map_err(|e| NsgError::json("splits", e))?;
            write_bytes(&dir.join("splits.json"), text.as_bytes())?;
            Some("splits.json".to_string())
        }
    };

    let manifest = Manifest {
        num_nodes: g.num_nodes,
        modalities: g.modalities.clone(),
        num_classes: g.num_classes,
        files: FileMap {
            edges: "edges.csv".into(),
            features: feature_files,
            labels,
            splits,
        },
        seed: g.seed,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| NsgError::json("manifest", e))?;
    write_bytes(&dir.join("manifest.json"), text.as_bytes())
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalMode {
    /// Every modality places class `c` at its prototype `c`.
    Aligned,
    /// Each node draws a latent `a` uniformly from `0..C`; even modalities
    /// use prototype `a`, odd modalities prototype `(c - a) mod C`. For a
    /// fixed class the second assignment is a permutation of the first, and
    /// averaged over `a` every class has the same concatenated mean: only
    /// the joint, per-modality reading identifies the class.
    AntiCorrelated,
}

/// Parameters of the class-block synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m: usize,
    pub num_classes: usize,
    pub dims: Vec<usize>,
    pub intra_class_edge_prob: f64,
    pub inter_class_edge_prob: f64,
    pub signal_mode: SignalMode,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// A spec with `m` modalities of equal dimension `dim`.
    pub fn new(n: usize, m: usize, num_classes: usize, dim: usize, seed: u64) -> Self {
        Self {
            n,
            m,
            num_classes,
            dims: vec![dim; m],
            intra_class_edge_prob: 0.05,
            inter_class_edge_prob: 0.01,
            signal_mode: SignalMode::Aligned,
            noise_std: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NsgError::InvalidConfig(msg));
        if self.m == 0 {
            return bad("modality count must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("class count must be at least 1".into());
        }
        if self.n < self.num_classes {
            return bad(format!(
                "node count {} below class count {}",
                self.n, self.num_classes
            ));
        }
        if self.dims.len() != self.m {
            return bad(format!("{} dims given for {} modalities", self.dims.len(), self.m));
        }
        if self.dims.contains(&0) {
            return bad("modality dimensions must be positive".into());
        }
        for (name, p) in [
            ("intra_class_edge_prob", self.intra_class_edge_prob),
            ("inter_class_edge_prob", self.inter_class_edge_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std = {} must be finite and >= 0", self.noise_std));
        }
        Ok(())
    }
}

/// Prototype index used by modality `t` for a node of class `c` with latent
/// draw `a` (ignored in aligned mode).
pub fn prototype_index(mode: SignalMode, t: usize, c: usize, a: usize, num_classes: usize) -> usize {
    match mode {
        SignalMode::Aligned => c,
        SignalMode::AntiCorrelated if t % 2 == 1 => (c + num_classes - a) % num_classes,
        SignalMode::AntiCorrelated => a,
    }
}

fn round_f32(x: f64) -> f64 {
    f64::from(x as f32)
}

/// Draws a labelled multimodal graph with a 60/20/20 node split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultimodalGraph> {
    spec.validate()?;
    let (n, c) = (spec.n, spec.num_classes);

    // Balanced labels, shuffled.
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng::stream(spec.seed, "synthetic/labels", 0));

    // Class-block edges.
    let mut edge_rng = rng::stream(spec.seed, "synthetic/edges", 0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] {
                spec.intra_class_edge_prob
            } else {
                spec.inter_class_edge_prob
            };
            if edge_rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    // Prototypes: shared across modalities of equal dimension so that
    // permuted assignments land on the same set of means.
    let mut proto_rng = rng::stream(spec.seed, "synthetic/prototypes", 0);
    let mut prototypes: BTreeMap<usize, Tensor2> = BTreeMap::new();
    for &d in &spec.dims {
        prototypes.entry(d).or_insert_with(|| {
            Tensor2::from_fn(c, d, |_, _| {
                let z: f64 = StandardNormal.sample(&mut proto_rng);
                z
            })
            .map(|x| x / (d as f64).sqrt())
        });
    }

    let mut latent_rng = rng::stream(spec.seed, "synthetic/latent", 0);
    let latent: Vec<usize> = (0..n).map(|_| latent_rng.random_range(0..c)).collect();

    let mut modalities = Vec::with_capacity(spec.m);
    let mut features = Vec::with_capacity(spec.m);
    for (t, &d) in spec.dims.iter().enumerate() {
        let proto = &prototypes[&d];
        let mut noise_rng = rng::stream(spec.seed, "synthetic/features", t as u64);
        let x = Tensor2::from_fn(n, d, |u, j| {
            let class = labels[u];
            let mean = proto[(prototype_index(spec.signal_mode, t, class, latent[u], c), j)];
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            let sd = spec.noise_std / (d as f64).sqrt();
            round_f32(mean + sd * z)
        });
        modalities.push(Modality {
            name: format!("m{t}"),
            dim: d,
        });
        features.push(x);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(spec.seed, "synthetic/splits", 0));
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    let g = MultimodalGraph {
        num_nodes: n,
        edges,
        modalities,
        features,
        num_classes: Some(c),
        labels: Some(labels),
        splits: Some(Splits {
            kind: SplitKind::Node,
            train,
            val,
            test,
        }),
        seed: Some(spec.seed),
    };
    g.validate()?;
    Ok(g)
}

/// Random edge split for link prediction: fractions `(train, val)` of the
/// edge list, remainder test.
pub fn edge_split(num_edges: usize, train_frac: f64, val_frac: f64, seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..num_edges).collect();
    order.shuffle(&mut rng::stream(seed, "edge-split", 0));
    let n_train = ((num_edges as f64) * train_frac).round() as usize;
    let n_val = ((num_edges as f64) * val_frac).round() as usize;
    let n_train = n_train.min(num_edges);
    let n_val = n_val.min(num_edges - n_train);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits {
        kind: SplitKind::Edge,
        train,
        val,
        test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MultimodalGraph {
        MultimodalGraph {
            num_nodes: 3,
            edges: vec![(0, 1), (1, 2)],
            modalities: vec![
                Modality {
                    name: "text".into(),
                    dim: 4,
                },
                Modality {
                    name: "image".into(),
                    dim: 3,
                },
            ],
            features: vec![
                Tensor2::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.25),
                Tensor2::from_fn(3, 3, |i, j| -((i + j) as f64) * 0.5),
            ],
            num_classes: None,
            labels: None,
            splits: None,
            seed: None,
        }
    }

    #[test]
    fn round_trip_two_modalities() {
        let dir = tempfile::tempdir().unwrap();
        let g = tiny();
        save_dataset(&g, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.num_modalities(), 2);
    }

    #[test]
    fn empty_edge_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = tiny();
        g.edges.clear();
        save_dataset(&g, dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join("edges.csv")).unwrap().len(), 0);
        assert_eq!(load_dataset(dir.path()).unwrap(), g);
    }

    #[test]
    fn labels_and_splits_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = tiny();
        g.num_classes = Some(2);
        g.labels = Some(vec![0, 1, 1]);
        g.splits = Some(Splits {
            kind: SplitKind::Node,
            train: vec![0],
            val: vec![2],
            test: vec![1],
        });
        g.seed = Some(99);
        save_dataset(&g, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), g);
    }

    #[test]
    fn self_loop_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join("edges.csv"), "0,1\n2,2\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, NsgError::SelfLoop { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("self-loop at line 2"));
    }

    #[test]
    fn duplicate_edge_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join("edges.csv"), "0,1\n1,0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, NsgError::DuplicateEdge { line: 2, .. }), "{err}");
    }

    #[test]
    fn header_row_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = tiny();
        save_dataset(&g, dir.path()).unwrap();
        write_feature_file(&dir.path().join("features_text.bin"), &Tensor2::zeros(4, 4)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(
            matches!(err, NsgError::DimensionMismatch { expected: 3, found: 4, .. }),
            "{err}"
        );
    }

    #[test]
    fn missing_file_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("features_image.bin")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(NsgError::MissingFile(_))
        ));
    }

    #[test]
    fn feature_file_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor2::from_rows(&[vec![1.0, -2.5]]);
        let p = dir.path().join("f.bin");
        write_feature_file(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        let mut want = b"NSGF".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let mut spec = SyntheticSpec::new(300, 2, 3, 8, 7);
        spec.signal_mode = SignalMode::AntiCorrelated;
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        spec.seed = 8;
        assert_ne!(generate_synthetic(&spec).unwrap(), a);
    }

    #[test]
    fn anti_assignment_is_a_per_class_permutation_with_flat_marginals() {
        for c_count in [2, 3, 4, 5] {
            let mut col_hits = vec![vec![0usize; c_count]; c_count];
            for c in 0..c_count {
                let mut seen = vec![false; c_count];
                for a in 0..c_count {
                    assert_eq!(prototype_index(SignalMode::AntiCorrelated, 0, c, a, c_count), a);
                    let b = prototype_index(SignalMode::AntiCorrelated, 1, c, a, c_count);
                    assert!(!seen[b]);
                    seen[b] = true;
                    col_hits[c][b] += 1;
                    assert_eq!((a + b) % c_count, c);
                }
            }
            // Every class visits every odd-modality prototype exactly once.
            assert!(col_hits.iter().flatten().all(|&h| h == 1));
        }
        assert_eq!(prototype_index(SignalMode::Aligned, 1, 2, 0, 4), 2);
    }

    #[test]
    fn zero_noise_aligned_gives_identical_class_features() {
        let mut spec = SyntheticSpec::new(40, 2, 4, 5, 3);
        spec.noise_std = 0.0;
        let g = generate_synthetic(&spec).unwrap();
        let labels = g.labels.as_ref().unwrap();
        for f in &g.features {
            for u in 0..g.num_nodes {
                for v in 0..g.num_nodes {
                    if labels[u] == labels[v] {
                        assert_eq!(f.row(u), f.row(v));
                    }
                }
            }
        }
    }

    #[test]
    fn synthetic_split_partitions_nodes() {
        let g = generate_synthetic(&SyntheticSpec::new(101, 1, 3, 4, 1)).unwrap();
        let s = g.splits.unwrap();
        assert_eq!(s.train.len(), 60);
        assert_eq!(s.val.len(), 20);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSpec::new(10, 0, 2, 3, 0);
        assert!(s.validate().is_err());
        s = SyntheticSpec::new(2, 1, 3, 3, 0);
        assert!(s.validate().is_err());
        s = SyntheticSpec::new(10, 1, 2, 3, 0);
        s.intra_class_edge_prob = 1.5;
        assert!(s.validate().is_err());
    }
}
