//! Dataset export and import.
//!
//! A split `NAME` is stored as two files:
//!
//! * `NAME.csv`, with header `sample_id,identity,camera,domain` and one row per sample;
//! * `NAME.bin`, four little-endian u64 (`count, height, width, channels`)
//!   followed by `count · height · width · channels` little-endian f64
//!   values, sample-major, then position, then channel.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use idm_core::data::{Dataset, Sample, SyntheticConfig, SyntheticData};
use idm_core::network::Domain;

use crate::error::{CliError, CliResult, Context};

pub const SPLITS: [&str; 4] = ["source", "target", "query", "gallery"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dims {
    pub fn of(config: &SyntheticConfig) -> Self {
        Self { height: config.height, width: config.width, channels: config.channels }
    }

    pub fn input_len(self) -> usize {
        self.height * self.width * self.channels
    }
}

const HEADER: [&str; 4] = ["sample_id", "identity", "camera", "domain"];

/// Writes `NAME.csv` and `NAME.bin` for one split. Target identities are ground truth.
pub fn write_split(dir: &Path, name: &str, set: &Dataset, dims: Dims) -> CliResult<()> {
    if set.input_len() != dims.input_len() {
        return Err(CliError::new(crate::error::Category::Dimension, format!("{name}: input length {} does not match {dims:?}", set.input_len())));
    }
    let csv_path = dir.join(format!("{name}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).context(csv_path.display())?;
    w.write_record(HEADER).context(csv_path.display())?;
    for (i, (id, cam)) in set.true_identities().into_iter().zip(set.cameras()).enumerate() {
        w.write_record([i.to_string(), id.to_string(), cam.to_string(), set.domain().name().to_string()]).context(csv_path.display())?;
    }
    w.flush().context(csv_path.display())?;

    let bin_path = dir.join(format!("{name}.bin"));
    let mut b = BufWriter::new(File::create(&bin_path).context(bin_path.display())?);
    for v in [set.len(), dims.height, dims.width, dims.channels] {
        b.write_all(&(v as u64).to_le_bytes()).context(bin_path.display())?;
    }
    for s in set.samples() {
        for v in s.input() {
            b.write_all(&v.to_le_bytes()).context(bin_path.display())?;
        }
    }
    b.flush().context(bin_path.display())
}

/// Reads a split written by [`write_split`].
pub fn read_split(dir: &Path, name: &str) -> CliResult<(Dataset, Dims)> {
    let bin_path = dir.join(format!("{name}.bin"));
    let mut r = BufReader::new(File::open(&bin_path).context(bin_path.display())?);
    let mut header = [0u8; 32];
    r.read_exact(&mut header).map_err(|_| CliError::format(format!("{}: truncated header", bin_path.display())))?;
    let h: Vec<usize> = header.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let (count, dims) = (h[0], Dims { height: h[1], width: h[2], channels: h[3] });
    let len = dims.input_len();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).context(bin_path.display())?;
    if Some(bytes.len()) != count.checked_mul(len).and_then(|n| n.checked_mul(8)) {
        return Err(CliError::format(format!("{}: expected {count} samples of {len} values, found {} bytes", bin_path.display(), bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let csv_path = dir.join(format!("{name}.csv"));
    let mut reader = csv::Reader::from_path(&csv_path).context(csv_path.display())?;
    if reader.headers().context(csv_path.display())?.iter().ne(HEADER) {
        return Err(CliError::format(format!("{}: header must be {}", csv_path.display(), HEADER.join(","))));
    }
    let mut domain = None;
    let mut samples = Vec::with_capacity(count);
    for (row, record) in reader.records().enumerate() {
        let record = record.context(csv_path.display())?;
        let field = |k: usize| -> CliResult<usize> {
            record[k].trim().parse().map_err(|_| CliError::format(format!("{}: row {}: bad {} `{}`", csv_path.display(), row + 1, HEADER[k], &record[k])))
        };
        if field(0)? != row {
            return Err(CliError::format(format!("{}: row {} has sample_id {}", csv_path.display(), row + 1, &record[0])));
        }
        let d = match &record[3] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(CliError::format(format!("{}: row {}: bad domain `{other}`", csv_path.display(), row + 1))),
        };
        if *domain.get_or_insert(d) != d {
            return Err(CliError::format(format!("{}: mixed domains in one split", csv_path.display())));
        }
        if row >= count {
            return Err(CliError::format(format!("{}: more rows than the {count} samples in {}", csv_path.display(), bin_path.display())));
        }
        samples.push(Sample::new(values[row * len..(row + 1) * len].to_vec(), field(1)?, field(2)?));
    }
    if samples.len() != count {
        return Err(CliError::format(format!("{}: {} rows for {count} samples", csv_path.display(), samples.len())));
    }
    let set = Dataset::new(domain.unwrap_or(Domain::Target), len, samples)?;
    Ok((set, dims))
}

/// Writes all four splits of `data` into `dir`, creating it if needed.
pub fn write_data(dir: &Path, data: &SyntheticData, dims: Dims) -> CliResult<()> {
    fs::create_dir_all(dir).context(dir.display())?;
    for (name, set) in SPLITS.iter().zip([&data.source, &data.target, &data.query, &data.gallery]) {
        write_split(dir, name, set, dims)?;
    }
    Ok(())
}

pub fn read_data(dir: &Path) -> CliResult<(SyntheticData, Dims)> {
    let (source, dims) = read_split(dir, "source")?;
    let mut rest = Vec::with_capacity(3);
    for name in &SPLITS[1..] {
        let (set, d) = read_split(dir, name)?;
        if d != dims {
            return Err(CliError::format(format!("split `{name}` has dims {d:?}, source has {dims:?}")));
        }
        rest.push(set);
    }
    let gallery = rest.pop().unwrap();
    let query = rest.pop().unwrap();
    let target = rest.pop().unwrap();
    Ok((SyntheticData { source, target, query, gallery }, dims))
}
