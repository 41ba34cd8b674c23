//! CSV readers and writers for event logs, labels and features.
//!
//! All files are UTF-8, comma-separated with `\n` line endings. Node types
//! and relations are written by name.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::SyntheticData;
use crate::error::{Error, Result};
use crate::schema::{week_of_day, EntityRef, EventRecord, LabelSet, Schema, TargetLabel};

pub const EVENTS_FILE: &str = "events.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const FEATURES_FILE: &str = "features.csv";

fn writer<W: Write>(inner: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(inner)
}

fn reader<R: Read>(inner: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(inner)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, what: &str, line: u64) -> Result<&'a str> {
    rec.get(i)
        .ok_or_else(|| Error::Validation(format!("line {line}: missing column `{what}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, line: u64) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Validation(format!("line {line}: cannot parse {what} from `{s}`")))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn write_events<W: Write>(out: W, schema: &Schema, events: &[EventRecord]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["target_type", "target_id", "linker_type", "linker_id", "relation", "week", "day"])?;
    for ev in events {
        w.write_record([
            schema.type_name(ev.target.node_type).to_string(),
            ev.target.id.to_string(),
            schema.type_name(ev.linker.node_type).to_string(),
            ev.linker.id.to_string(),
            schema.relation_name(ev.relation).to_string(),
            ev.week.to_string(),
            ev.day.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<events>", e))?;
    Ok(())
}

pub fn read_events<R: Read>(input: R, schema: &Schema) -> Result<Vec<EventRecord>> {
    let mut out = Vec::new();
    for rec in reader(input).records() {
        let rec = rec?;
        let line = line_of(&rec);
        let target = EntityRef::new(
            schema.node_type(field(&rec, 0, "target_type", line)?)?,
            parse_num(field(&rec, 1, "target_id", line)?, "target_id", line)?,
        );
        let linker = EntityRef::new(
            schema.node_type(field(&rec, 2, "linker_type", line)?)?,
            parse_num(field(&rec, 3, "linker_id", line)?, "linker_id", line)?,
        );
        let relation = schema.relation(field(&rec, 4, "relation", line)?)?;
        let week: u32 = parse_num(field(&rec, 5, "week", line)?, "week", line)?;
        let day: u32 = parse_num(field(&rec, 6, "day", line)?, "day", line)?;
        if week_of_day(day) != week {
            return Err(Error::Validation(format!("line {line}: day {day} is not in week {week}")));
        }
        let ev = EventRecord {
            target,
            linker,
            relation,
            week,
            day,
        };
        schema.check_event(&ev)?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_labels<W: Write>(out: W, schema: &Schema, labels: &LabelSet) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["target_type", "target_id", "binary_label", "risk_level"])?;
    for (t, l) in &labels.labels {
        w.write_record([
            schema.type_name(t.node_type).to_string(),
            t.id.to_string(),
            l.binary.to_string(),
            l.risk_level.map(|r| r.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<labels>", e))?;
    Ok(())
}

pub fn read_labels<R: Read>(input: R, schema: &Schema, into: &mut LabelSet) -> Result<()> {
    for rec in reader(input).records() {
        let rec = rec?;
        let line = line_of(&rec);
        let t = EntityRef::new(
            schema.node_type(field(&rec, 0, "target_type", line)?)?,
            parse_num(field(&rec, 1, "target_id", line)?, "target_id", line)?,
        );
        let binary: u8 = parse_num(field(&rec, 2, "binary_label", line)?, "binary_label", line)?;
        let risk = rec.get(3).map(str::trim).filter(|s| !s.is_empty());
        let risk_level = risk.map(|s| parse_num::<u8>(s, "risk_level", line)).transpose()?;
        into.insert(t, TargetLabel { binary, risk_level })?;
    }
    Ok(())
}

pub fn write_features<W: Write>(out: W, schema: &Schema, labels: &LabelSet) -> Result<()> {
    let mut w = writer(out);
    let mut header = vec!["target_type".to_string(), "target_id".to_string()];
    header.extend((0..labels.feature_dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (t, values) in &labels.features {
        let mut row = vec![schema.type_name(t.node_type).to_string(), t.id.to_string()];
        row.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<features>", e))?;
    Ok(())
}

pub fn read_features<R: Read>(input: R, schema: &Schema, into: &mut LabelSet) -> Result<()> {
    let mut rdr = reader(input);
    let width = rdr.headers()?.len();
    if width < 2 {
        return Err(Error::Validation("feature file needs target_type,target_id columns".into()));
    }
    into.feature_dim = width - 2;
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let t = EntityRef::new(
            schema.node_type(field(&rec, 0, "target_type", line)?)?,
            parse_num(field(&rec, 1, "target_id", line)?, "target_id", line)?,
        );
        let values = (2..width)
            .map(|i| parse_num::<f64>(field(&rec, i, "feature", line)?, "feature", line))
            .collect::<Result<Vec<f64>>>()?;
        into.set_features(t, values)?;
    }
    Ok(())
}

/// Writes `events.csv`, `labels.csv` and `features.csv` into `dir`.
pub fn write_dataset(dir: &Path, schema: &Schema, data: &SyntheticData) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_events(create(&dir.join(EVENTS_FILE))?, schema, &data.events)?;
    write_labels(create(&dir.join(LABELS_FILE))?, schema, &data.labels)?;
    write_features(create(&dir.join(FEATURES_FILE))?, schema, &data.labels)?;
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`]. The feature file
/// is optional.
pub fn read_dataset(dir: &Path, schema: &Schema) -> Result<SyntheticData> {
    let events = read_events(open(&dir.join(EVENTS_FILE))?, schema)?;
    let mut labels = LabelSet::default();
    read_labels(open(&dir.join(LABELS_FILE))?, schema, &mut labels)?;
    let feature_path = dir.join(FEATURES_FILE);
    if feature_path.exists() {
        read_features(open(&feature_path)?, schema, &mut labels)?;
    }
    Ok(SyntheticData { events, labels })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

/// Creates (truncating) a buffered file.
pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}
