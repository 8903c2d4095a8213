//! Plain-text graph directories.
//!
//! ```text
//! graph.meta      key=value lines: n=<count>, directed=false
//! graph.edges     one "u<TAB>v" pair per line, 0-indexed
//! graph.features  optional, one comma-separated FP32 row per vertex
//! graph.labels    optional, one integer class per line (-1 = unlabeled)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Features, Graph, GraphError};

pub const META_FILE: &str = "graph.meta";
pub const EDGES_FILE: &str = "graph.edges";
pub const FEATURES_FILE: &str = "graph.features";
pub const LABELS_FILE: &str = "graph.labels";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GraphError {
    GraphError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_optional(path: &Path) -> Result<Option<String>, GraphError> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

/// Numbered non-blank lines, 1-based.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn save_graph(g: &Graph, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, body: String| -> Result<(), GraphError> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))
    };
    write(META_FILE, format!("n={}\ndirected=false\n", g.n()))?;

    let mut edges = String::with_capacity(g.edge_count() * 12);
    for &(u, v) in g.edges() {
        writeln!(edges, "{u}\t{v}").unwrap();
    }
    write(EDGES_FILE, edges)?;

    if let Some(f) = &g.features {
        let mut body = String::new();
        for row in f.data.chunks(f.cols.max(1)) {
            let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            body.push_str(&cells.join(","));
            body.push('\n');
        }
        write(FEATURES_FILE, body)?;
    }
    if let Some(labels) = &g.labels {
        let mut body = String::new();
        for l in labels {
            match l {
                Some(c) => writeln!(body, "{c}").unwrap(),
                None => body.push_str("-1\n"),
            }
        }
        write(LABELS_FILE, body)?;
    }
    Ok(())
}

pub fn load_graph(dir: &Path) -> Result<Graph, GraphError> {
    let path = |name: &str| -> PathBuf { dir.join(name) };

    let mut n = None;
    let meta_path = path(META_FILE);
    if let Some(meta) = read_optional(&meta_path)? {
        for (no, line) in lines(&meta) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(&meta_path, no, "expected key=value"))?;
            match key.trim() {
                "n" => {
                    n = Some(
                        value
                            .trim()
                            .parse::<usize>()
                            .map_err(|e| parse_err(&meta_path, no, format!("bad vertex count: {e}")))?,
                    )
                }
                "directed" if value.trim() != "false" => {
                    return Err(parse_err(&meta_path, no, "only undirected graphs are supported"))
                }
                _ => {}
            }
        }
    }

    let edges_path = path(EDGES_FILE);
    let text = fs::read_to_string(&edges_path).map_err(io_err(&edges_path))?;
    let mut edges = Vec::new();
    for (no, line) in lines(&text) {
        let mut parts = line.split(|c: char| c == '\t' || c == ' ').filter(|s| !s.is_empty());
        let mut endpoint = || -> Result<usize, GraphError> {
            let tok = parts
                .next()
                .ok_or_else(|| parse_err(&edges_path, no, "expected two vertex ids"))?;
            tok.parse()
                .map_err(|_| parse_err(&edges_path, no, format!("invalid vertex id `{tok}`")))
        };
        let (u, v) = (endpoint()?, endpoint()?);
        if parts.next().is_some() {
            return Err(parse_err(&edges_path, no, "expected exactly two vertex ids"));
        }
        edges.push((u, v, no));
    }

    let features_path = path(FEATURES_FILE);
    let features = match read_optional(&features_path)? {
        None => None,
        Some(text) => {
            let mut data = Vec::new();
            let mut cols = None;
            let mut rows = 0;
            for (no, line) in lines(&text) {
                let before = data.len();
                for cell in line.split(',') {
                    let x: f32 = cell
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(&features_path, no, format!("invalid number `{}`", cell.trim())))?;
                    data.push(x);
                }
                let width = data.len() - before;
                if *cols.get_or_insert(width) != width {
                    return Err(parse_err(&features_path, no, "ragged feature row"));
                }
                rows += 1;
            }
            Some(Features {
                rows,
                cols: cols.unwrap_or(0),
                data,
            })
        }
    };

    let labels_path = path(LABELS_FILE);
    let labels = match read_optional(&labels_path)? {
        None => None,
        Some(text) => {
            let mut out = Vec::new();
            for (no, line) in lines(&text) {
                let c: i64 = line
                    .parse()
                    .map_err(|_| parse_err(&labels_path, no, format!("invalid class `{line}`")))?;
                out.push(if c < 0 { None } else { Some(c as usize) });
            }
            Some(out)
        }
    };

    let n = n
        .or(features.as_ref().map(|f| f.rows))
        .or(labels.as_ref().map(|l| l.len()))
        .unwrap_or_else(|| edges.iter().map(|&(u, v, _)| u.max(v) + 1).max().unwrap_or(0));
    for &(u, v, no) in &edges {
        if u >= n || v >= n {
            return Err(parse_err(&edges_path, no, format!("vertex id out of range 0..{n}")));
        }
        if u == v {
            return Err(parse_err(&edges_path, no, "self-loop"));
        }
    }
    let mut g = Graph::new(n, edges.into_iter().map(|(u, v, _)| (u, v)))?;
    if let Some(f) = features {
        g = g.with_features(f)?;
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(GraphError::LengthMismatch {
                what: "labels",
                expected: n,
                got: l.len(),
            });
        }
        g.labels = Some(l);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = Graph::new(4, [(0, 1), (1, 2), (2, 3)])
            .unwrap()
            .with_labels(vec![0, 1, 0, 1])
            .unwrap()
            .with_features(Features {
                rows: 4,
                cols: 2,
                data: vec![0.5, 1.0, 0.0, -2.25, 1e-3, 3.0, 0.1, 7.0],
            })
            .unwrap();
        save_graph(&g, dir.path()).unwrap();
        let back = load_graph(dir.path()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.n(), 4);
        assert_eq!(back.edge_count(), 3);

        let first = fs::read(dir.path().join(EDGES_FILE)).unwrap();
        save_graph(&back, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(EDGES_FILE)).unwrap(), first);
    }

    #[test]
    fn malformed_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(META_FILE), "n=3\n").unwrap();
        fs::write(dir.path().join(EDGES_FILE), "0\t1\n1\tx\n").unwrap();
        let err = load_graph(dir.path()).unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains(":2:"));
    }
}
