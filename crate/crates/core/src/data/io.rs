//! Dataset files: a CSV layout, a raw little-endian `f32` layout and a
//! truth sidecar CSV.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Result, SsnnError};
use crate::generative::{LatentPath, Sequence};

use super::Dataset;

const MAGIC: &[u8; 8] = b"SSNNDAT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    RawF32,
}

impl std::str::FromStr for Format {
    type Err = SsnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "raw-f32" => Ok(Format::RawF32),
            other => Err(SsnnError::contract(format!(
                "unknown dataset format {other:?} (expected csv or raw-f32)"
            ))),
        }
    }
}

impl Format {
    /// Guess from the file extension: `.csv` is CSV, anything else raw.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            _ => Format::RawF32,
        }
    }
}

/// `data.csv` → `data.truth.csv`.
pub fn truth_sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    path.with_file_name(format!("{stem}.truth.csv"))
}

/// Writes `bytes` to a temporary file next to `path` and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| SsnnError::Io(e.error))?;
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: &Path, format: Format) -> Result<()> {
    super::check_dims(&dataset.sequences)?;
    let bytes = match format {
        Format::Csv => csv_bytes(dataset)?,
        Format::RawF32 => raw_bytes(dataset)?,
    };
    write_atomic(path, &bytes)?;
    if dataset.sequences.iter().any(|x| x.truth.is_some()) {
        write_atomic(&truth_sidecar_path(path), &truth_bytes(dataset)?)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path, format: Format) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut sequences = match format {
        Format::Csv => parse_csv(&bytes)?,
        Format::RawF32 => parse_raw(&bytes)?,
    };
    let sidecar = truth_sidecar_path(path);
    if sidecar.exists() {
        attach_truth(&mut sequences, &std::fs::read(&sidecar)?)?;
    }
    Dataset::new(sequences)
}

fn csv_err(e: csv::Error) -> SsnnError {
    let location = e
        .position()
        .map_or_else(|| "unknown position".to_string(), |p| format!("line {}", p.line()));
    SsnnError::parse(location, e.to_string())
}

fn csv_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let m = dataset.obs_dim().max(1);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["seq_id".to_string(), "t".to_string()];
    header.extend((0..m).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for x in &dataset.sequences {
        for (t, row) in x.rows().enumerate() {
            let mut rec = vec![x.id.clone(), t.to_string()];
            // shortest representation that parses back to the same f64
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| SsnnError::Io(e.into_error()))
}

fn truth_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seq_id", "t", "z", "d"]).map_err(csv_err)?;
    for x in &dataset.sequences {
        let Some(p) = &x.truth else { continue };
        for t in 0..p.len() {
            w.write_record([x.id.clone(), t.to_string(), p.z[t].to_string(), p.d[t].to_string()])
                .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| SsnnError::Io(e.into_error()))
}

/// Groups rows by `seq_id` in order of first appearance; `t` must count up from 0.
fn parse_csv(bytes: &[u8]) -> Result<Vec<Sequence>> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(SsnnError::Schema("empty dataset file".into()));
    }
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r.headers().map_err(csv_err)?.clone();
    let m = header.len().saturating_sub(2);
    let expected: Vec<String> = ["seq_id".to_string(), "t".to_string()]
        .into_iter()
        .chain((0..m).map(|j| format!("x{j}")))
        .collect();
    if m == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(SsnnError::Schema(format!(
            "header must be seq_id,t,x0..x(m-1), got {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => SsnnError::Schema(format!("inconsistent row width: {e}")),
            _ => csv_err(e),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0].to_string();
        let t: usize = rec[1].trim().parse().map_err(|_| {
            SsnnError::parse(format!("line {line}, column 2 (t)"), format!("not a step index: {:?}", &rec[1]))
        })?;
        let data = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if t != data.len() / m {
            return Err(SsnnError::parse(
                format!("line {line}, column 2 (t)"),
                format!("sequence {id}: expected t = {}, got {t}", data.len() / m),
            ));
        }
        for j in 0..m {
            let cell = &rec[2 + j];
            let v: f64 = cell.trim().parse().map_err(|_| {
                SsnnError::parse(
                    format!("line {line}, column {} (x{j})", 3 + j),
                    format!("not a number: {cell:?}"),
                )
            })?;
            data.push(v);
        }
    }
    if order.is_empty() {
        return Err(SsnnError::Schema("dataset file has a header but no rows".into()));
    }
    order
        .into_iter()
        .map(|id| {
            let data = rows.remove(&id).unwrap();
            let steps = data.len() / m;
            Sequence::new(id, steps, m, data)
        })
        .collect()
}

fn attach_truth(sequences: &mut [Sequence], bytes: &[u8]) -> Result<()> {
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(["seq_id", "t", "z", "d"]) {
        return Err(SsnnError::Schema("truth header must be seq_id,t,z,d".into()));
    }
    let mut paths: HashMap<String, LatentPath> = HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<usize> {
            rec[i].trim().parse().map_err(|_| {
                SsnnError::parse(
                    format!("truth line {line}, column {} ({name})", i + 1),
                    format!("not an integer: {:?}", &rec[i]),
                )
            })
        };
        let (t, z, d) = (field(1, "t")?, field(2, "z")?, field(3, "d")?);
        let p = paths.entry(rec[0].to_string()).or_insert_with(|| LatentPath {
            z: Vec::new(),
            d: Vec::new(),
        });
        if t != p.len() {
            return Err(SsnnError::parse(
                format!("truth line {line}"),
                format!("expected t = {}, got {t}", p.len()),
            ));
        }
        p.z.push(z);
        p.d.push(d);
    }
    for x in sequences.iter_mut() {
        if let Some(p) = paths.remove(&x.id) {
            if p.len() != x.len() {
                return Err(SsnnError::Schema(format!(
                    "truth for {} has {} steps, sequence has {}",
                    x.id,
                    p.len(),
                    x.len()
                )));
            }
            x.truth = Some(p);
        }
    }
    if let Some(id) = paths.keys().next() {
        return Err(SsnnError::Schema(format!("truth for unknown sequence {id}")));
    }
    Ok(())
}

fn raw_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let u32_of = |v: usize, what: &str| -> Result<u32> {
        u32::try_from(v).map_err(|_| SsnnError::contract(format!("{what} {v} does not fit in u32")))
    };
    out.extend_from_slice(&u32_of(dataset.len(), "sequence count")?.to_le_bytes());
    for x in &dataset.sequences {
        out.extend_from_slice(&u32_of(x.id.len(), "id length")?.to_le_bytes());
        out.extend_from_slice(x.id.as_bytes());
        out.extend_from_slice(&u32_of(x.len(), "T")?.to_le_bytes());
        out.extend_from_slice(&u32_of(x.dim(), "m")?.to_le_bytes());
        for v in x.values() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SsnnError::parse(
                format!("byte offset {}", self.pos),
                format!("file ends inside {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

fn parse_raw(bytes: &[u8]) -> Result<Vec<Sequence>> {
    if bytes.is_empty() {
        return Err(SsnnError::Schema("empty dataset file".into()));
    }
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(SsnnError::parse("byte offset 0", "bad magic (expected SSNNDAT1)"));
    }
    let count = c.u32("sequence count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = c.u32("id length")?;
        let at = c.pos;
        let id = std::str::from_utf8(c.take(id_len, "id")?)
            .map_err(|_| SsnnError::parse(format!("byte offset {at}"), "id is not UTF-8"))?
            .to_string();
        let steps = c.u32("T")?;
        let m = c.u32("m")?;
        let n = steps
            .checked_mul(m)
            .ok_or_else(|| SsnnError::parse(format!("byte offset {}", c.pos), "T·m overflows"))?;
        let at = c.pos;
        let raw = c.take(n.checked_mul(4).unwrap_or(usize::MAX), "sequence data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push(Sequence::new(id, steps, m, data).map_err(|e| {
            SsnnError::parse(format!("byte offset {at}"), e.to_string())
        })?);
    }
    if c.pos != bytes.len() {
        return Err(SsnnError::parse(
            format!("byte offset {}", c.pos),
            "trailing bytes after the last sequence",
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, f32_exact: bool) -> Dataset {
        let seqs = (0..3)
            .map(|i| {
                let steps = rng.random_range(1..8);
                let data = (0..steps * 3)
                    .map(|_| {
                        let v: f64 = rng.random_range(-5.0..5.0);
                        if f32_exact {
                            v as f32 as f64
                        } else {
                            v
                        }
                    })
                    .collect();
                let x = Sequence::new(format!("s{i}"), steps, 3, data).unwrap();
                let path = LatentPath::from_segments(&[(1, 2), (0, 9)], steps);
                x.with_truth(path).unwrap()
            })
            .collect();
        Dataset::new(seqs).unwrap()
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = random_dataset(&mut rng, false);
        let p = dir.path().join("d.csv");
        write_dataset(&ds, &p, Format::Csv).unwrap();
        assert!(truth_sidecar_path(&p).exists());
        assert_eq!(read_dataset(&p, Format::Csv).unwrap(), ds);

        let ds = random_dataset(&mut rng, true);
        let p = dir.path().join("d.bin");
        write_dataset(&ds, &p, Format::RawF32).unwrap();
        assert_eq!(read_dataset(&p, Format::RawF32).unwrap(), ds);
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "seq_id,t,x0,x1\na,0,1.0,2.0\na,1,oops,3.0\n").unwrap();
        let err = read_dataset(&p, Format::Csv).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, SsnnError::Parse { .. }));
        assert!(msg.contains("line 3") && msg.contains("x0"), "{msg}");
    }

    #[test]
    fn empty_and_inconsistent_files_are_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(read_dataset(&p, Format::Csv), Err(SsnnError::Schema(_))));
        let p = dir.path().join("e.bin");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(read_dataset(&p, Format::RawF32), Err(SsnnError::Schema(_))));
        let p = dir.path().join("w.csv");
        std::fs::write(&p, "seq_id,t,x0\na,0,1.0,2.0\n").unwrap();
        assert!(matches!(read_dataset(&p, Format::Csv), Err(SsnnError::Schema(_))));
        let mixed = Dataset {
            sequences: vec![
                Sequence::new("a", 1, 1, vec![0.0]).unwrap(),
                Sequence::new("b", 1, 2, vec![0.0, 1.0]).unwrap(),
            ],
            stats: None,
        };
        assert!(matches!(
            write_dataset(&mixed, &dir.path().join("m.bin"), Format::RawF32),
            Err(SsnnError::Schema(_))
        ));
    }

    #[test]
    fn truncated_raw_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = random_dataset(&mut rng, true);
        let p = dir.path().join("t.bin");
        write_dataset(&ds, &p, Format::RawF32).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let msg = read_dataset(&p, Format::RawF32).unwrap_err().to_string();
        assert!(msg.contains("byte offset"), "{msg}");
    }
}
