use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{FeatureStream, Modality, RuptureError};

/// One row of a window-label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub subject_id: String,
    pub t_start: i64,
    #[serde(with = "label_int")]
    pub label: bool,
}

mod label_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

fn csv_err(e: csv::Error) -> RuptureError {
    let line = e.position().map(|p| format!("line {}: ", p.line())).unwrap_or_default();
    RuptureError::Csv(format!("{line}{e}"))
}

/// Reads `subject_id,t_seconds,f_0..f_{w-1}` rows into one stream per subject.
pub fn read_streams_csv<R: Read>(reader: R, modality: Modality) -> Result<Vec<FeatureStream>, RuptureError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let width = modality.width();
    let header_len = rdr.headers().map_err(csv_err)?.len();
    if header_len != width + 2 {
        return Err(RuptureError::Csv(format!(
            "{} file needs {} columns (subject_id, t_seconds, {width} features), found {header_len}",
            modality.name(),
            width + 2
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_subject: BTreeMap<String, (Vec<f64>, Vec<Vec<f64>>)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| RuptureError::Csv(format!("line {line}: `{s}` is not a number")))
        };
        let subject = rec[0].trim().to_string();
        let t = parse(&rec[1])?;
        let values = rec.iter().skip(2).map(parse).collect::<Result<Vec<_>, _>>()?;
        let entry = by_subject.entry(subject.clone()).or_insert_with(|| {
            order.push(subject.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(t);
        entry.1.push(values);
    }
    order
        .into_iter()
        .map(|s| {
            let (ts, vs) = by_subject.remove(&s).expect("subject recorded");
            FeatureStream::new(modality, s, ts, vs)
        })
        .collect()
}

pub fn write_streams_csv<W: Write>(writer: W, streams: &[FeatureStream]) -> Result<(), RuptureError> {
    let mut w = csv::Writer::from_writer(writer);
    let width = streams.first().map_or(0, |s| s.modality.width());
    let mut header = vec!["subject_id".to_string(), "t_seconds".to_string()];
    header.extend((0..width).map(|j| format!("f_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in streams {
        for (t, v) in s.timestamps.iter().zip(&s.values) {
            let mut row = vec![s.subject_id.clone(), t.to_string()];
            row.extend(v.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv<R: Read>(reader: R) -> Result<Vec<LabelRow>, RuptureError> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(csv_err)).collect()
}

pub fn write_labels_csv<W: Write>(writer: W, labels: &[LabelRow]) -> Result<(), RuptureError> {
    let mut w = csv::Writer::from_writer(writer);
    for l in labels {
        w.serialize(l).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_csv_round_trip() {
        let s = FeatureStream::new(Modality::Audio, "p1", vec![0.0, 0.5], vec![vec![0.25; 25], vec![-1.5; 25]]).unwrap();
        let mut buf = Vec::new();
        write_streams_csv(&mut buf, std::slice::from_ref(&s)).unwrap();
        assert_eq!(read_streams_csv(buf.as_slice(), Modality::Audio).unwrap(), vec![s]);
        assert!(read_streams_csv(buf.as_slice(), Modality::Facial).is_err());
    }

    #[test]
    fn label_csv_round_trip_and_errors() {
        let rows = vec![LabelRow { subject_id: "p1".into(), t_start: 7, label: true }];
        let mut buf = Vec::new();
        write_labels_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "subject_id,t_start,label\np1,7,1\n");
        assert_eq!(read_labels_csv(buf.as_slice()).unwrap(), rows);
        let bad = "subject_id,t_start,label\np1,7,2\n";
        let err = read_labels_csv(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
