//! On-disk formats.
//!
//! * **Field files** (`.ghmf`): a little-endian binary container for one
//!   scalar field — magic `GHMF`, a format version byte, the rank, the
//!   extents as `u32`s, then the values as `f64`s in row-major order
//!   (last axis fastest).
//! * **Problem files**: a line-oriented text format declaring the grid,
//!   the label tree, and per-label terms. `#` starts a comment. The first
//!   content line must be `grid d1 [d2 [d3]]`. Each further line is either
//!   `node <name> parent=<name|ROOT> [data=<v>] [smooth=<v>]` or an
//!   optional `root [data=<v>] [smooth=<v>]` carrying terms for the
//!   implicit root. A value `<v>` is `const:<float>` or a path to a field
//!   file, resolved relative to the problem file. Omitted data terms stay
//!   absent; omitted boundary weights are zero.
//! * **Flat model files**: the same node grammar with every label attached
//!   directly to `ROOT` and one shared boundary weight.
//! * **Ordered model files**: `grid` followed by
//!   `level <i> [data=<v>] [smooth=<v>]` lines covering `0..=N`.
//! * **Solution directories**: one `u_<leaf>.ghmf` per leaf, a hardened
//!   label map (`labels.pgm` for rank-2 grids, `labels.ghmf` otherwise),
//!   and a `solution.txt` summary.
//!
//! All parse errors carry a 1-based line and column.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fields::{GridGeometry, ScalarField};
use crate::hierarchy::{build_hierarchy, Hierarchy, HierarchyError};
use crate::oracle::DiscreteLabeling;
use crate::problem::{GhmfProblem, Labeling, ProblemError};
use crate::reductions::{IshikawaLevel, IshikawaSpec, PottsSpec, ROOT_NAME};
use crate::solver::{threshold, Solution};

const MAGIC: &[u8; 4] = b"GHMF";
const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("not a field file (bad magic)")]
    BadMagic,
    #[error("unsupported field file version {0}")]
    BadVersion(u8),
    #[error("field has dimensions {got:?}, expected {want:?}")]
    DimsMismatch { want: Vec<usize>, got: Vec<usize> },
    #[error("file ends before the declared payload")]
    Truncated,
    #[error("trailing bytes after the declared payload")]
    TrailingData,
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: io::Error },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn file_err(path: &Path, source: io::Error) -> IoError {
    IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Attaches a path to an error that does not already carry one, for
/// multi-file operations.
fn at_path(path: &Path, error: IoError) -> IoError {
    match error {
        IoError::File { .. } => error,
        other => file_err(
            path,
            io::Error::new(io::ErrorKind::InvalidData, other.to_string()),
        ),
    }
}

// ---------------------------------------------------------------------------
// Field files.

/// Serializes a field into the binary container format.
pub fn encode_field(field: &ScalarField<f64>) -> Result<Vec<u8>, IoError> {
    let geometry = field.geometry();
    let mut bytes =
        Vec::with_capacity(6 + 4 * geometry.rank() + 8 * geometry.voxel_count());
    bytes.extend_from_slice(MAGIC);
    bytes.push(FORMAT_VERSION);
    bytes.push(geometry.rank() as u8);
    for &extent in geometry.dims() {
        let extent = u32::try_from(extent).map_err(|_| {
            IoError::Unsupported(format!("extent {extent} does not fit the file format"))
        })?;
        bytes.extend_from_slice(&extent.to_le_bytes());
    }
    for &value in field.values() {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    Ok(bytes)
}

/// Deserializes a field from the binary container format.
pub fn decode_field(bytes: &[u8]) -> Result<ScalarField<f64>, IoError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(IoError::BadMagic);
    }
    if bytes.len() < 5 {
        return Err(IoError::Truncated);
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(IoError::BadVersion(bytes[4]));
    }
    if bytes.len() < 6 {
        return Err(IoError::Truncated);
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(IoError::Truncated);
    }
    let dims: Vec<usize> = (0..rank)
        .map(|axis| {
            let at = 6 + 4 * axis;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("slice is 4 bytes")) as usize
        })
        .collect();
    let geometry = GridGeometry::new(&dims)
        .map_err(|e| IoError::Unsupported(format!("invalid field geometry: {e}")))?;
    let n = geometry.voxel_count();
    let total = header + 8 * n;
    if bytes.len() < total {
        return Err(IoError::Truncated);
    }
    if bytes.len() > total {
        return Err(IoError::TrailingData);
    }
    let values: Vec<f64> = bytes[header..]
        .chunks_exact(8)
        .map(|chunk| f64::from_le_bytes(chunk.try_into().expect("chunk is 8 bytes")))
        .collect();
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(IoError::NonFinite(bad));
    }
    Ok(ScalarField::from_values(&geometry, values).expect("length and finiteness checked"))
}

/// Reads a field file from disk.
pub fn read_field(path: &Path) -> Result<ScalarField<f64>, IoError> {
    let bytes = fs::read(path).map_err(|source| file_err(path, source))?;
    decode_field(&bytes)
}

/// Writes a field file to disk.
pub fn write_field(path: &Path, field: &ScalarField<f64>) -> Result<(), IoError> {
    let bytes = encode_field(field)?;
    fs::write(path, bytes).map_err(|source| file_err(path, source))
}

// ---------------------------------------------------------------------------
// Tokenizing.

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    line: usize,
    column: usize,
}

/// Splits a file into per-line whitespace-separated tokens, stripping `#`
/// comments; lines and columns are 1-based (columns count bytes).
fn tokenize(text: &str) -> Vec<Vec<Token<'_>>> {
    text.lines()
        .enumerate()
        .map(|(index, raw)| {
            let content = match raw.find('#') {
                Some(hash) => &raw[..hash],
                None => raw,
            };
            let mut tokens = Vec::new();
            let mut start: Option<usize> = None;
            for (offset, ch) in content.char_indices() {
                if ch.is_whitespace() {
                    if let Some(from) = start.take() {
                        tokens.push(Token {
                            text: &content[from..offset],
                            line: index + 1,
                            column: from + 1,
                        });
                    }
                } else if start.is_none() {
                    start = Some(offset);
                }
            }
            if let Some(from) = start {
                tokens.push(Token {
                    text: &content[from..],
                    line: index + 1,
                    column: from + 1,
                });
            }
            tokens
        })
        .collect()
}

#[derive(Debug, Clone)]
enum RawValue {
    Const(f64),
    Path(String),
}

/// A data/smooth attribute value with the position of its token.
type Attr = (RawValue, usize, usize);

fn parse_raw_value(value: &str, line: usize, column: usize) -> Result<RawValue, IoError> {
    if let Some(rest) = value.strip_prefix("const:") {
        let parsed: f64 = rest
            .parse()
            .map_err(|_| parse_err(line, column, format!("invalid constant '{rest}'")))?;
        if !parsed.is_finite() {
            return Err(parse_err(
                line,
                column,
                format!("constant {parsed} is not finite"),
            ));
        }
        Ok(RawValue::Const(parsed))
    } else {
        Ok(RawValue::Path(value.to_string()))
    }
}

fn split_attr<'a>(token: &Token<'a>) -> Result<(&'a str, &'a str), IoError> {
    match token.text.split_once('=') {
        Some((key, value)) if !key.is_empty() && !value.is_empty() => Ok((key, value)),
        _ => Err(parse_err(
            token.line,
            token.column,
            format!("expected key=value, found '{}'", token.text),
        )),
    }
}

// ---------------------------------------------------------------------------
// Problem files.

#[derive(Debug)]
struct NodeDecl {
    name: String,
    line: usize,
    column: usize,
    parent: String,
    parent_pos: (usize, usize),
    data: Option<Attr>,
    smooth: Option<Attr>,
}

#[derive(Debug, Default)]
struct RootDecl {
    line: usize,
    column: usize,
    data: Option<Attr>,
    smooth: Option<Attr>,
}

struct Structure {
    geometry: GridGeometry,
    root: Option<RootDecl>,
    nodes: Vec<NodeDecl>,
}

fn parse_structure(text: &str) -> Result<Structure, IoError> {
    let mut geometry: Option<GridGeometry> = None;
    let mut root: Option<RootDecl> = None;
    let mut nodes: Vec<NodeDecl> = Vec::new();
    let mut seen: HashMap<String, (usize, usize)> = HashMap::new();

    for line_tokens in tokenize(text) {
        let Some(head) = line_tokens.first() else {
            continue;
        };
        match head.text {
            "grid" => {
                if geometry.is_some() {
                    return Err(parse_err(head.line, head.column, "duplicate grid line"));
                }
                let extents = &line_tokens[1..];
                if extents.is_empty() || extents.len() > 3 {
                    return Err(parse_err(
                        head.line,
                        head.column,
                        format!("grid takes 1 to 3 extents, got {}", extents.len()),
                    ));
                }
                let mut dims = Vec::with_capacity(extents.len());
                for token in extents {
                    let extent: usize = token.text.parse().map_err(|_| {
                        parse_err(
                            token.line,
                            token.column,
                            format!("invalid grid extent '{}'", token.text),
                        )
                    })?;
                    if extent == 0 {
                        return Err(parse_err(
                            token.line,
                            token.column,
                            "grid extents must be at least 1",
                        ));
                    }
                    dims.push(extent);
                }
                geometry = Some(
                    GridGeometry::new(&dims)
                        .map_err(|e| parse_err(head.line, head.column, e.to_string()))?,
                );
            }
            "node" => {
                if geometry.is_none() {
                    return Err(parse_err(
                        head.line,
                        head.column,
                        "the grid line must come before any nodes",
                    ));
                }
                let Some(name_token) = line_tokens.get(1) else {
                    return Err(parse_err(head.line, head.column, "node needs a name"));
                };
                if name_token.text.contains('=') {
                    return Err(parse_err(
                        name_token.line,
                        name_token.column,
                        "expected a node name before the attributes",
                    ));
                }
                if name_token.text == ROOT_NAME {
                    return Err(parse_err(
                        name_token.line,
                        name_token.column,
                        format!("'{ROOT_NAME}' names the implicit root and cannot be declared"),
                    ));
                }
                if let Some(&(line, _)) = seen.get(name_token.text) {
                    return Err(parse_err(
                        name_token.line,
                        name_token.column,
                        format!(
                            "duplicate node name '{}' (first declared on line {line})",
                            name_token.text
                        ),
                    ));
                }
                let mut parent: Option<(String, (usize, usize))> = None;
                let mut data: Option<Attr> = None;
                let mut smooth: Option<Attr> = None;
                for token in &line_tokens[2..] {
                    let (key, value) = split_attr(token)?;
                    match key {
                        "parent" => {
                            if parent.is_some() {
                                return Err(parse_err(
                                    token.line,
                                    token.column,
                                    "duplicate attribute 'parent'",
                                ));
                            }
                            parent =
                                Some((value.to_string(), (token.line, token.column)));
                        }
                        "data" | "smooth" => {
                            let slot = if key == "data" { &mut data } else { &mut smooth };
                            if slot.is_some() {
                                return Err(parse_err(
                                    token.line,
                                    token.column,
                                    format!("duplicate attribute '{key}'"),
                                ));
                            }
                            *slot = Some((
                                parse_raw_value(value, token.line, token.column)?,
                                token.line,
                                token.column,
                            ));
                        }
                        other => {
                            return Err(parse_err(
                                token.line,
                                token.column,
                                format!("unknown attribute '{other}'"),
                            ));
                        }
                    }
                }
                let Some((parent, parent_pos)) = parent else {
                    return Err(parse_err(
                        name_token.line,
                        name_token.column,
                        format!("node '{}' is missing the parent attribute", name_token.text),
                    ));
                };
                seen.insert(
                    name_token.text.to_string(),
                    (name_token.line, name_token.column),
                );
                nodes.push(NodeDecl {
                    name: name_token.text.to_string(),
                    line: name_token.line,
                    column: name_token.column,
                    parent,
                    parent_pos,
                    data,
                    smooth,
                });
            }
            "root" => {
                if geometry.is_none() {
                    return Err(parse_err(
                        head.line,
                        head.column,
                        "the grid line must come before any nodes",
                    ));
                }
                if root.is_some() {
                    return Err(parse_err(head.line, head.column, "duplicate root line"));
                }
                let mut decl = RootDecl {
                    line: head.line,
                    column: head.column,
                    ..RootDecl::default()
                };
                for token in &line_tokens[1..] {
                    let (key, value) = split_attr(token)?;
                    match key {
                        "data" | "smooth" => {
                            let slot = if key == "data" {
                                &mut decl.data
                            } else {
                                &mut decl.smooth
                            };
                            if slot.is_some() {
                                return Err(parse_err(
                                    token.line,
                                    token.column,
                                    format!("duplicate attribute '{key}'"),
                                ));
                            }
                            *slot = Some((
                                parse_raw_value(value, token.line, token.column)?,
                                token.line,
                                token.column,
                            ));
                        }
                        "parent" => {
                            return Err(parse_err(
                                token.line,
                                token.column,
                                "the root cannot have a parent",
                            ));
                        }
                        other => {
                            return Err(parse_err(
                                token.line,
                                token.column,
                                format!("unknown attribute '{other}'"),
                            ));
                        }
                    }
                }
                root = Some(decl);
            }
            other => {
                return Err(parse_err(
                    head.line,
                    head.column,
                    format!("unknown directive '{other}'"),
                ));
            }
        }
    }

    let Some(geometry) = geometry else {
        return Err(parse_err(1, 1, "missing grid line"));
    };
    Ok(Structure {
        geometry,
        root,
        nodes,
    })
}

/// Maps a hierarchy construction error back to the source position of the
/// declaration that caused it.
fn locate_hierarchy_error(error: HierarchyError, nodes: &[NodeDecl]) -> IoError {
    let named = |name: &str| nodes.iter().find(|n| n.name == name);
    let (line, column) = match &error {
        HierarchyError::UnknownParent(parent) => nodes
            .iter()
            .find(|n| &n.parent == parent)
            .map(|n| n.parent_pos)
            .unwrap_or((1, 1)),
        HierarchyError::CycleDetected(name)
        | HierarchyError::Disconnected(name)
        | HierarchyError::DuplicateName(name)
        | HierarchyError::InconsistentLinks(name) => named(name)
            .map(|n| (n.line, n.column))
            .unwrap_or((1, 1)),
        _ => (1, 1),
    };
    parse_err(line, column, error.to_string())
}

fn load_attr(
    attr: &Attr,
    base_dir: &Path,
    geometry: &GridGeometry,
) -> Result<ScalarField<f64>, IoError> {
    let (value, line, column) = attr;
    match value {
        RawValue::Const(v) => Ok(ScalarField::constant(geometry, *v)),
        RawValue::Path(rel) => {
            let full = base_dir.join(rel);
            let bytes = fs::read(&full).map_err(|e| {
                parse_err(*line, *column, format!("{}: {e}", full.display()))
            })?;
            let field = decode_field(&bytes)
                .map_err(|e| parse_err(*line, *column, format!("{}: {e}", full.display())))?;
            if field.geometry() != geometry {
                return Err(parse_err(
                    *line,
                    *column,
                    format!(
                        "{}: field has dimensions {:?}, expected {:?}",
                        full.display(),
                        field.geometry().dims(),
                        geometry.dims()
                    ),
                ));
            }
            Ok(field)
        }
    }
}

fn load_smoothness_attr(
    attr: &Attr,
    base_dir: &Path,
    geometry: &GridGeometry,
) -> Result<ScalarField<f64>, IoError> {
    let field = load_attr(attr, base_dir, geometry)?;
    if let Some(i) = field.values().iter().position(|&v| v < 0.0) {
        let (_, line, column) = attr;
        return Err(parse_err(
            *line,
            *column,
            format!("negative boundary weight {} at voxel {i}", field.values()[i]),
        ));
    }
    Ok(field)
}

/// Parses a problem file from disk; value paths resolve relative to it.
pub fn parse_problem(path: &Path) -> Result<GhmfProblem<f64>, IoError> {
    let text = fs::read_to_string(path).map_err(|source| file_err(path, source))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_problem_str(&text, base)
}

/// Parses problem text; value paths resolve relative to `base_dir`.
pub fn parse_problem_str(text: &str, base_dir: &Path) -> Result<GhmfProblem<f64>, IoError> {
    let structure = parse_structure(text)?;
    let mut entries: Vec<(&str, Option<&str>)> = vec![(ROOT_NAME, None)];
    for node in &structure.nodes {
        entries.push((node.name.as_str(), Some(node.parent.as_str())));
    }
    let hierarchy = build_hierarchy(&entries)
        .map_err(|e| locate_hierarchy_error(e, &structure.nodes))?;

    let geometry = structure.geometry;
    let n = hierarchy.node_count();
    let mut data: Vec<Option<ScalarField<f64>>> = vec![None; n];
    let mut smooth: Vec<ScalarField<f64>> = vec![ScalarField::zeros(&geometry); n];
    if let Some(root_decl) = &structure.root {
        if let Some(attr) = &root_decl.data {
            data[hierarchy.root().index()] = Some(load_attr(attr, base_dir, &geometry)?);
        }
        if let Some(attr) = &root_decl.smooth {
            smooth[hierarchy.root().index()] =
                load_smoothness_attr(attr, base_dir, &geometry)?;
        }
    }
    for node in &structure.nodes {
        let id = hierarchy
            .id_of(&node.name)
            .expect("declared nodes are in the hierarchy");
        if let Some(attr) = &node.data {
            data[id.index()] = Some(load_attr(attr, base_dir, &geometry)?);
        }
        if let Some(attr) = &node.smooth {
            smooth[id.index()] = load_smoothness_attr(attr, base_dir, &geometry)?;
        }
    }
    Ok(GhmfProblem::new(hierarchy, geometry, data, smooth)?)
}

fn writable_name(name: &str) -> Result<&str, IoError> {
    if name.is_empty()
        || name.contains(|c: char| c.is_whitespace())
        || name.contains('=')
        || name.contains('#')
    {
        return Err(IoError::Unsupported(format!(
            "node name '{name}' cannot be written to a problem file"
        )));
    }
    Ok(name)
}

/// Renders a term either inline (`const:<v>` when all values are equal) or
/// as a field file `<node>_<kind>.ghmf` written next to the problem file.
fn render_value(
    dir: &Path,
    node: &str,
    kind: &str,
    field: &ScalarField<f64>,
) -> Result<String, IoError> {
    let first = field.values()[0];
    if field
        .values()
        .iter()
        .all(|v| v.to_bits() == first.to_bits())
    {
        Ok(format!("const:{first}"))
    } else {
        let filename = format!("{node}_{kind}.ghmf");
        write_field(&dir.join(&filename), field)?;
        Ok(filename)
    }
}

/// Writes a problem file (plus field files for non-constant terms) so that
/// [`parse_problem`] reconstructs an equivalent problem. The root is
/// serialized implicitly: its name is not preserved (it reads back as
/// `ROOT`) and its boundary weight, which the model never uses, is
/// dropped.
pub fn write_problem(path: &Path, problem: &GhmfProblem<f64>) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let hierarchy = problem.hierarchy();
    let geometry = problem.geometry();
    let mut out = String::new();
    let dims: Vec<String> = geometry.dims().iter().map(|d| d.to_string()).collect();
    writeln!(out, "grid {}", dims.join(" ")).expect("writing to a string cannot fail");

    let root = hierarchy.root();
    if let Some(field) = problem.data_term(root) {
        let name = writable_name(hierarchy.name(root))?;
        let value = render_value(dir, name, "data", field)?;
        writeln!(out, "root data={value}").expect("writing to a string cannot fail");
    }
    for label in hierarchy.labels() {
        if label == root {
            continue;
        }
        let name = writable_name(hierarchy.name(label))?;
        let parent = hierarchy.parent(label).expect("non-root label has a parent");
        let parent_name = if parent == root {
            ROOT_NAME
        } else {
            writable_name(hierarchy.name(parent))?
        };
        let mut line = format!("node {name} parent={parent_name}");
        if let Some(field) = problem.data_term(label) {
            let value = render_value(dir, name, "data", field)?;
            line.push_str(&format!(" data={value}"));
        }
        let smoothness = problem.smoothness(label);
        if smoothness.values().iter().any(|&v| v != 0.0) {
            let value = render_value(dir, name, "smooth", smoothness)?;
            line.push_str(&format!(" smooth={value}"));
        }
        writeln!(out, "{line}").expect("writing to a string cannot fail");
    }
    fs::write(path, out).map_err(|source| file_err(path, source))
}

// ---------------------------------------------------------------------------
// Flat (shared-boundary) model files.

/// Parses a flat model file: the problem grammar restricted to labels
/// attached directly to `ROOT`, all sharing one boundary weight. Omitted
/// data terms read as zero.
pub fn parse_potts(path: &Path) -> Result<PottsSpec<f64>, IoError> {
    let text = fs::read_to_string(path).map_err(|source| file_err(path, source))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let structure = parse_structure(&text)?;
    if let Some(root_decl) = &structure.root {
        return Err(parse_err(
            root_decl.line,
            root_decl.column,
            "a flat model input cannot declare root attributes",
        ));
    }
    let geometry = structure.geometry;
    let mut labels = Vec::with_capacity(structure.nodes.len());
    let mut data_terms = Vec::with_capacity(structure.nodes.len());
    let mut smoothness: Option<(ScalarField<f64>, usize, usize)> = None;
    for node in &structure.nodes {
        if node.parent != ROOT_NAME {
            return Err(parse_err(
                node.parent_pos.0,
                node.parent_pos.1,
                format!(
                    "flat model labels must have parent={ROOT_NAME}, got '{}'",
                    node.parent
                ),
            ));
        }
        let data = match &node.data {
            Some(attr) => load_attr(attr, base, &geometry)?,
            None => ScalarField::zeros(&geometry),
        };
        let smooth = match &node.smooth {
            Some(attr) => load_smoothness_attr(attr, base, &geometry)?,
            None => ScalarField::zeros(&geometry),
        };
        match &smoothness {
            None => smoothness = Some((smooth, node.line, node.column)),
            Some((shared, _, _)) => {
                if shared.values() != smooth.values() {
                    let (line, column) = node
                        .smooth
                        .as_ref()
                        .map(|(_, l, c)| (*l, *c))
                        .unwrap_or((node.line, node.column));
                    return Err(parse_err(
                        line,
                        column,
                        format!(
                            "label '{}' does not share the common boundary weight",
                            node.name
                        ),
                    ));
                }
            }
        }
        labels.push(node.name.clone());
        data_terms.push(data);
    }
    let Some((smoothness, _, _)) = smoothness else {
        return Err(parse_err(1, 1, "a flat model needs at least one node line"));
    };
    Ok(PottsSpec {
        labels,
        geometry,
        data_terms,
        smoothness,
    })
}

// ---------------------------------------------------------------------------
// Ordered (level-chain) model files.

/// Parses an ordered model file: a `grid` line followed by
/// `level <i> [data=<v>] [smooth=<v>]` lines that together cover every
/// index `0..=N` exactly once. Omitted terms read as zero.
pub fn parse_ishikawa(path: &Path) -> Result<IshikawaSpec<f64>, IoError> {
    let text = fs::read_to_string(path).map_err(|source| file_err(path, source))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut geometry: Option<GridGeometry> = None;
    let mut levels: HashMap<usize, (Option<Attr>, Option<Attr>)> = HashMap::new();
    let mut declared: HashMap<usize, usize> = HashMap::new(); // index -> line

    for line_tokens in tokenize(&text) {
        let Some(head) = line_tokens.first() else {
            continue;
        };
        match head.text {
            "grid" => {
                if geometry.is_some() {
                    return Err(parse_err(head.line, head.column, "duplicate grid line"));
                }
                let extents = &line_tokens[1..];
                if extents.is_empty() || extents.len() > 3 {
                    return Err(parse_err(
                        head.line,
                        head.column,
                        format!("grid takes 1 to 3 extents, got {}", extents.len()),
                    ));
                }
                let mut dims = Vec::with_capacity(extents.len());
                for token in extents {
                    let extent: usize = token.text.parse().map_err(|_| {
                        parse_err(
                            token.line,
                            token.column,
                            format!("invalid grid extent '{}'", token.text),
                        )
                    })?;
                    if extent == 0 {
                        return Err(parse_err(
                            token.line,
                            token.column,
                            "grid extents must be at least 1",
                        ));
                    }
                    dims.push(extent);
                }
                geometry = Some(
                    GridGeometry::new(&dims)
                        .map_err(|e| parse_err(head.line, head.column, e.to_string()))?,
                );
            }
            "level" => {
                if geometry.is_none() {
                    return Err(parse_err(
                        head.line,
                        head.column,
                        "the grid line must come before any levels",
                    ));
                }
                let Some(index_token) = line_tokens.get(1) else {
                    return Err(parse_err(head.line, head.column, "level needs an index"));
                };
                let index: usize = index_token.text.parse().map_err(|_| {
                    parse_err(
                        index_token.line,
                        index_token.column,
                        format!("invalid level index '{}'", index_token.text),
                    )
                })?;
                if let Some(&line) = declared.get(&index) {
                    return Err(parse_err(
                        index_token.line,
                        index_token.column,
                        format!("duplicate level {index} (first declared on line {line})"),
                    ));
                }
                let mut data: Option<Attr> = None;
                let mut smooth: Option<Attr> = None;
                for token in &line_tokens[2..] {
                    let (key, value) = split_attr(token)?;
                    match key {
                        "data" | "smooth" => {
                            let slot = if key == "data" { &mut data } else { &mut smooth };
                            if slot.is_some() {
                                return Err(parse_err(
                                    token.line,
                                    token.column,
                                    format!("duplicate attribute '{key}'"),
                                ));
                            }
                            *slot = Some((
                                parse_raw_value(value, token.line, token.column)?,
                                token.line,
                                token.column,
                            ));
                        }
                        other => {
                            return Err(parse_err(
                                token.line,
                                token.column,
                                format!("unknown attribute '{other}'"),
                            ));
                        }
                    }
                }
                declared.insert(index, head.line);
                levels.insert(index, (data, smooth));
            }
            other => {
                return Err(parse_err(
                    head.line,
                    head.column,
                    format!("unknown directive '{other}'"),
                ));
            }
        }
    }

    let Some(geometry) = geometry else {
        return Err(parse_err(1, 1, "missing grid line"));
    };
    if levels.is_empty() {
        return Err(parse_err(1, 1, "an ordered model needs level lines"));
    }
    let top = *levels.keys().max().expect("levels is non-empty");
    for index in 0..=top {
        if !levels.contains_key(&index) {
            return Err(parse_err(
                1,
                1,
                format!("levels must cover 0..={top} contiguously; level {index} is missing"),
            ));
        }
    }
    let mut out = Vec::with_capacity(top + 1);
    for index in 0..=top {
        let (data, smooth) = &levels[&index];
        let data = match data {
            Some(attr) => load_attr(attr, base, &geometry)?,
            None => ScalarField::zeros(&geometry),
        };
        let smoothness = match smooth {
            Some(attr) => load_smoothness_attr(attr, base, &geometry)?,
            None => ScalarField::zeros(&geometry),
        };
        out.push(IshikawaLevel { data, smoothness });
    }
    Ok(IshikawaSpec {
        geometry,
        levels: out,
    })
}

// ---------------------------------------------------------------------------
// Solution directories.

/// Writes a solved instance into `dir`: one `u_<leaf>.ghmf` per leaf (in
/// label order), a hardened per-voxel label map (`labels.pgm` for rank-2
/// grids, `labels.ghmf` with label ids as values otherwise), and a
/// `solution.txt` with the energy, the dual bound, their gap, the
/// iteration count, and the convergence flag.
pub fn write_solution(dir: &Path, solution: &Solution<f64>) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|source| file_err(dir, source))?;
    let hierarchy = &solution.hierarchy;
    let leaves = hierarchy.leaves();
    for &leaf in &leaves {
        if solution.labeling.get(leaf).is_none() {
            return Err(IoError::Unsupported(format!(
                "solution is missing the weight field for leaf '{}'",
                hierarchy.name(leaf)
            )));
        }
    }
    for &leaf in &leaves {
        let name = writable_name(hierarchy.name(leaf))?;
        let path = dir.join(format!("u_{name}.ghmf"));
        write_field(&path, solution.labeling.get(leaf).expect("checked above"))?;
    }

    let discrete = threshold(solution);
    write_label_map(dir, &discrete)?;

    let path = dir.join("solution.txt");
    fs::write(&path, solution_summary(solution)).map_err(|source| file_err(&path, source))
}

/// Writes a hardened label map into `dir`: an 8-bit PGM (`labels.pgm`,
/// pixel value = label id) for rank-2 grids, a field file of label ids
/// (`labels.ghmf`) otherwise.
pub fn write_label_map(dir: &Path, labeling: &DiscreteLabeling) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|source| file_err(dir, source))?;
    let geometry = labeling.geometry();
    if geometry.rank() == 2 {
        let mut bytes = format!("P5\n{} {}\n255\n", geometry.dims()[1], geometry.dims()[0])
            .into_bytes();
        for &label in labeling.assignments() {
            let id = label.index();
            if id > 255 {
                return Err(IoError::Unsupported(format!(
                    "label id {id} does not fit an 8-bit label map"
                )));
            }
            bytes.push(id as u8);
        }
        let path = dir.join("labels.pgm");
        fs::write(&path, bytes).map_err(|source| file_err(&path, source))
    } else {
        let ids = ScalarField::from_fn(geometry, |i| labeling.assignments()[i].index() as f64);
        write_field(&dir.join("labels.ghmf"), &ids)
    }
}

/// The `solution.txt` content: one `key=value` line each for the energy,
/// the dual bound, their gap (12 significant digits), the iteration
/// count, and the convergence flag.
pub fn solution_summary(solution: &Solution<f64>) -> String {
    let mut summary = String::new();
    writeln!(summary, "energy={:.11e}", solution.energy).expect("writing to a string cannot fail");
    writeln!(summary, "dual_value={:.11e}", solution.dual_value)
        .expect("writing to a string cannot fail");
    writeln!(summary, "gap={:.11e}", solution.gap).expect("writing to a string cannot fail");
    writeln!(summary, "iterations={}", solution.iterations)
        .expect("writing to a string cannot fail");
    writeln!(summary, "converged={}", solution.converged)
        .expect("writing to a string cannot fail");
    summary
}

/// Reads the per-leaf weight fields of a solution directory back into a
/// labeling for the given problem (branches resolve as children sums).
pub fn read_labeling(dir: &Path, problem: &GhmfProblem<f64>) -> Result<Labeling<f64>, IoError> {
    let hierarchy = problem.hierarchy();
    let mut labeling = Labeling::new(hierarchy.node_count());
    for &leaf in &hierarchy.leaves() {
        let path = dir.join(format!("u_{}.ghmf", hierarchy.name(leaf)));
        let field = read_field(&path).map_err(|e| at_path(&path, e))?;
        if field.geometry() != problem.geometry() {
            return Err(at_path(
                &path,
                IoError::DimsMismatch {
                    want: problem.geometry().dims().to_vec(),
                    got: field.geometry().dims().to_vec(),
                },
            ));
        }
        labeling.set(leaf, field);
    }
    Ok(labeling)
}

/// Convenience: the names of the leaf weight files [`write_solution`]
/// produces for this hierarchy, in label order.
pub fn leaf_field_names(hierarchy: &Hierarchy) -> Vec<String> {
    hierarchy
        .leaves()
        .iter()
        .map(|&leaf| format!("u_{}.ghmf", hierarchy.name(leaf)))
        .collect()
}
