use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::mpsc;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{io_err, run_single, HarnessError, RunSpec, Source};
use crate::autodiff::OptLevel;
use crate::metrics::{RunRecord, Task};

pub const SCHEMA_VERSION: u32 = 1;

/// Parameter grid. Every combination of the list-valued fields is one run.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub tasks: Vec<Task>,
    pub levels: Vec<OptLevel>,
    pub use_features: Vec<bool>,
    pub model_sizes: Vec<usize>,
    pub vertex_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub padding: Vec<bool>,
    pub epochs: usize,
    pub memory_budget_bytes: Option<u64>,
}

impl SweepGrid {
    /// The full published grid: 4 levels, 2 feature settings, 8 model sizes,
    /// 31 vertex counts and 5 seeds for the classifier.
    pub fn full() -> SweepGrid {
        SweepGrid {
            tasks: vec![Task::Classify],
            levels: OptLevel::ALL.to_vec(),
            use_features: vec![false, true],
            model_sizes: (4..=11).map(|p| 1usize << p).collect(),
            vertex_counts: (2..=32).map(|k| k * 1024).collect(),
            seeds: (0..5).collect(),
            padding: vec![true],
            epochs: 200,
            memory_budget_bytes: None,
        }
    }

    /// A reduced grid that finishes in minutes on one core.
    pub fn desk() -> SweepGrid {
        SweepGrid {
            tasks: vec![Task::Classify, Task::Link],
            levels: OptLevel::ALL.to_vec(),
            use_features: vec![false, true],
            model_sizes: vec![16, 64],
            vertex_counts: vec![1024, 2048],
            seeds: vec![0, 1],
            padding: vec![true],
            epochs: 20,
            memory_budget_bytes: None,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.tasks.len()
            * self.levels.len()
            * self.use_features.len()
            * self.model_sizes.len()
            * self.vertex_counts.len()
            * self.seeds.len()
            * self.padding.len()
    }

    /// Run keys in a fixed nesting order, seeds innermost.
    pub fn keys(&self) -> Vec<RunKey> {
        let mut keys = Vec::with_capacity(self.cardinality());
        for &task in &self.tasks {
            for &n in &self.vertex_counts {
                for &features in &self.use_features {
                    for &d in &self.model_sizes {
                        for &padding in &self.padding {
                            for &level in &self.levels {
                                for &seed in &self.seeds {
                                    keys.push(RunKey {
                                        task,
                                        level,
                                        n,
                                        d,
                                        features,
                                        padding,
                                        seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        keys
    }

    pub fn spec(&self, key: &RunKey) -> RunSpec {
        RunSpec {
            task: key.task,
            level: key.level,
            source: Source::Ba {
                n: key.n,
                features: key.features,
                seed: key.seed,
            },
            model_size: key.d,
            padding: key.padding,
            seed: key.seed,
            epochs: self.epochs,
            memory_budget: self.memory_budget_bytes,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.cardinality() == 0 {
            return Err(HarnessError::InvalidGrid("every axis needs at least one value".into()));
        }
        if self.model_sizes.contains(&0) {
            return Err(HarnessError::InvalidGrid("model sizes must be positive".into()));
        }
        if let Some(&n) = self.vertex_counts.iter().find(|&&n| n <= super::BA_ATTACHMENTS) {
            return Err(HarnessError::InvalidGrid(format!("vertex count {n} is too small")));
        }
        Ok(())
    }
}

/// Identity of one sweep row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub task: Task,
    pub level: OptLevel,
    pub n: usize,
    pub d: usize,
    pub features: bool,
    pub padding: bool,
    pub seed: u64,
}

impl RunKey {
    pub fn of(r: &RunRecord) -> RunKey {
        RunKey {
            task: r.task,
            level: r.level,
            n: r.n,
            d: r.d,
            features: r.features,
            padding: r.padding,
            seed: r.seed,
        }
    }
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/n={}/d={}/features={}/padding={}/seed={}",
            self.task, self.level, self.n, self.d, self.features, self.padding, self.seed
        )
    }
}

/// One CSV line. Column order is the file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub schema_version: u32,
    pub task: Task,
    pub level: OptLevel,
    pub n: usize,
    pub d: usize,
    pub features: bool,
    pub padding: bool,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub accuracy: Option<f64>,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub ap: Option<f64>,
    pub peak_bytes: u64,
    pub wall_ms: f64,
    pub gemm_count: u64,
    pub eligible_gemm_count: u64,
    pub oom: bool,
    pub collapsed: bool,
}

impl From<&RunRecord> for CsvRow {
    fn from(r: &RunRecord) -> CsvRow {
        CsvRow {
            schema_version: SCHEMA_VERSION,
            task: r.task,
            level: r.level,
            n: r.n,
            d: r.d,
            features: r.features,
            padding: r.padding,
            seed: r.seed,
            epochs: r.epochs,
            final_loss: r.final_loss,
            accuracy: r.accuracy,
            auc_roc: r.auc_roc,
            auc_pr: r.auc_pr,
            ap: r.ap,
            peak_bytes: r.peak_bytes,
            wall_ms: r.wall_ms,
            gemm_count: r.gemm_count,
            eligible_gemm_count: r.eligible_gemm_count,
            oom: r.oom,
            collapsed: r.collapsed,
        }
    }
}

impl From<CsvRow> for RunRecord {
    fn from(r: CsvRow) -> RunRecord {
        RunRecord {
            task: r.task,
            level: r.level,
            n: r.n,
            d: r.d,
            features: r.features,
            padding: r.padding,
            seed: r.seed,
            epochs: r.epochs,
            final_loss: r.final_loss,
            accuracy: r.accuracy,
            auc_roc: r.auc_roc,
            auc_pr: r.auc_pr,
            ap: r.ap,
            peak_bytes: r.peak_bytes,
            wall_ms: r.wall_ms,
            gemm_count: r.gemm_count,
            eligible_gemm_count: r.eligible_gemm_count,
            oom: r.oom,
            collapsed: r.collapsed,
            loss_curve: Vec::new(),
        }
    }
}

impl CsvRow {
    /// Serialized line without header, newline-terminated.
    pub fn to_line(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.serialize(self)?;
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }

    pub fn header() -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(placeholder()).expect("in-memory write");
        let bytes = w.into_inner().expect("in-memory flush");
        let end = bytes.iter().position(|&b| b == b'\n').expect("header line");
        bytes[..=end].to_vec()
    }
}

fn placeholder() -> CsvRow {
    CsvRow {
        schema_version: SCHEMA_VERSION,
        task: Task::Classify,
        level: OptLevel::O0,
        n: 0,
        d: 0,
        features: false,
        padding: false,
        seed: 0,
        epochs: 0,
        final_loss: 0.0,
        accuracy: None,
        auc_roc: None,
        auc_pr: None,
        ap: None,
        peak_bytes: 0,
        wall_ms: 0.0,
        gemm_count: 0,
        eligible_gemm_count: 0,
        oom: false,
        collapsed: false,
    }
}

/// Reads every complete row of a sweep CSV. A trailing line without a
/// newline is an interrupted write and is ignored.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut text = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut text))
        .map_err(io_err(path))?;
    parse_rows(path, complete_prefix(&text))
}

fn complete_prefix(bytes: &[u8]) -> &[u8] {
    match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => &bytes[..=i],
        None => &[],
    }
}

fn parse_rows(path: &Path, bytes: &[u8]) -> Result<Vec<RunRecord>, HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(csv_err)?;
        if row.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Schema {
                path: path.to_path_buf(),
                found: row.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        out.push(row.into());
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    /// Rows already present and skipped.
    pub resumed: usize,
    /// Rows written by this call.
    pub written: Vec<RunRecord>,
}

/// Opens `path` for appending, creating it with a header if needed and
/// cutting off an interrupted trailing line. Returns the completed rows.
fn open_for_append(path: &Path) -> Result<(File, Vec<RunRecord>), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(false)
        .open(path)
        .map_err(io_err(path))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(path))?;
    let keep = complete_prefix(&bytes).len();
    if keep < bytes.len() {
        file.set_len(keep as u64).map_err(io_err(path))?;
    }
    file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
    if keep == 0 {
        file.write_all(&CsvRow::header()).map_err(io_err(path))?;
        file.sync_data().map_err(io_err(path))?;
        return Ok((file, Vec::new()));
    }
    let done = parse_rows(path, &bytes[..keep])?;
    Ok((file, done))
}

/// Appends one record to a sweep CSV, creating it when missing.
pub fn append_record(path: &Path, record: &RunRecord) -> Result<(), HarnessError> {
    let (mut file, _) = open_for_append(path)?;
    let line = CsvRow::from(record).to_line().map_err(|source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&line).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

/// Runs every grid point not already in `out_path`, appending one row per
/// finished run. `jobs` worker threads train concurrently; rows are written
/// by the calling thread only, each with a single `write` call, so an
/// interrupted sweep leaves at most one partial line.
pub fn run_sweep(
    grid: &SweepGrid,
    out_path: &Path,
    jobs: usize,
    mut on_row: impl FnMut(&RunRecord),
) -> Result<SweepOutcome, HarnessError> {
    grid.validate()?;
    let (mut file, done) = open_for_append(out_path)?;
    let mut completed: HashMap<RunKey, usize> = HashMap::new();
    for r in &done {
        completed.insert(RunKey::of(r), r.epochs);
    }

    let mut todo = Vec::new();
    let mut resumed = 0;
    for key in grid.keys() {
        match completed.get(&key) {
            Some(&epochs) if epochs == grid.epochs => resumed += 1,
            Some(&epochs) => {
                return Err(HarnessError::ResumeConflict {
                    path: out_path.to_path_buf(),
                    key: key.to_string(),
                    existing: format!("epochs={epochs}"),
                    requested: format!("epochs={}", grid.epochs),
                })
            }
            None => todo.push(key),
        }
    }

    let mut written = Vec::with_capacity(todo.len());
    let queue = Mutex::new(todo.into_iter().enumerate());
    let workers = jobs.max(1);
    std::thread::scope(|scope| -> Result<(), HarnessError> {
        let (tx, rx) = mpsc::channel::<Result<RunRecord, HarnessError>>();
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((_, key)) = next else { break };
                if tx.send(run_single(&grid.spec(&key))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for result in rx {
            let record = match result {
                Ok(r) => r,
                Err(e) => {
                    // Stop handing out work; the scope joins running workers.
                    queue.lock().expect("queue lock").by_ref().for_each(drop);
                    return Err(e);
                }
            };
            let line = CsvRow::from(&record).to_line().map_err(|source| HarnessError::Csv {
                path: out_path.to_path_buf(),
                source,
            })?;
            file.write_all(&line).map_err(io_err(out_path))?;
            file.sync_data().map_err(io_err(out_path))?;
            on_row(&record);
            written.push(record);
        }
        Ok(())
    })?;
    Ok(SweepOutcome { resumed, written })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SweepGrid {
        SweepGrid {
            tasks: vec![Task::Classify],
            levels: vec![OptLevel::O0],
            use_features: vec![false],
            model_sizes: vec![8],
            vertex_counts: vec![64],
            seeds: vec![0],
            padding: vec![true],
            epochs: 2,
            memory_budget_bytes: None,
        }
    }

    #[test]
    fn cardinalities() {
        assert_eq!(SweepGrid::full().cardinality(), 9920);
        assert_eq!(SweepGrid::full().vertex_counts.len(), 31);
        assert_eq!(tiny().cardinality(), 1);
        assert_eq!(SweepGrid::desk().keys().len(), SweepGrid::desk().cardinality());
    }

    #[test]
    fn header_matches_schema() {
        let header = String::from_utf8(CsvRow::header()).unwrap();
        assert_eq!(
            header.trim_end(),
            "schema_version,task,level,n,d,features,padding,seed,epochs,final_loss,accuracy,auc_roc,auc_pr,ap,\
             peak_bytes,wall_ms,gemm_count,eligible_gemm_count,oom,collapsed"
        );
    }

    #[test]
    fn resume_and_conflict() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let first = run_sweep(&tiny(), &path, 1, |_| {}).unwrap();
        assert_eq!((first.resumed, first.written.len()), (0, 1));
        let again = run_sweep(&tiny(), &path, 1, |_| {}).unwrap();
        assert_eq!((again.resumed, again.written.len()), (1, 0));
        assert_eq!(read_records(&path).unwrap().len(), 1);

        let mut longer = tiny();
        longer.epochs = 3;
        assert!(matches!(
            run_sweep(&longer, &path, 1, |_| {}),
            Err(HarnessError::ResumeConflict { .. })
        ));
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        run_sweep(&tiny(), &path, 1, |_| {}).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"1,classify,O0,64,8,false,true,1,2,0.6").unwrap();
        drop(f);
        assert_eq!(read_records(&path).unwrap().len(), 1);

        let mut two = tiny();
        two.seeds = vec![0, 1];
        let out = run_sweep(&two, &path, 1, |_| {}).unwrap();
        assert_eq!((out.resumed, out.written.len()), (1, 1));
        let rows = read_records(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(fs::read_to_string(&path).unwrap().ends_with('\n'));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let out = run_sweep(&tiny(), &path, 1, |_| {}).unwrap();
        let mut expected = out.written[0].clone();
        expected.loss_curve.clear();
        assert_eq!(read_records(&path).unwrap(), vec![expected]);
    }

    #[test]
    fn rejects_other_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let mut bytes = CsvRow::header();
        let mut row = placeholder();
        row.schema_version = 9;
        bytes.extend(row.to_line().unwrap());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_records(&path), Err(HarnessError::Schema { found: 9, .. })));
    }
}
