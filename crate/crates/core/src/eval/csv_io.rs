//! CSV dumps of detections, anchors, loss curves and reports.

use std::io::{Read, Write};

use thiserror::Error;

use super::{DetectedEvent, EvalReport};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn parse_err(rec: &csv::StringRecord, msg: impl Into<String>) -> CsvError {
    CsvError::Parse {
        line: rec.position().map_or(0, |p| p.line()),
        msg: msg.into(),
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, CsvError>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(i).ok_or_else(|| parse_err(rec, format!("missing column {name}")))?;
    raw.trim()
        .parse()
        .map_err(|e| parse_err(rec, format!("column {name}: {e} ({raw:?})")))
}

fn expect_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<(), CsvError> {
    let header = rdr.headers()?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(CsvError::Parse {
            line: 1,
            msg: format!("expected header {expected:?}, got {got:?}"),
        });
    }
    Ok(())
}

const DETECTION_HEADER: [&str; 5] = ["video_id", "category", "t_start", "t_end", "score"];

pub fn write_detections(out: impl Write, detections: &[DetectedEvent]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DETECTION_HEADER)?;
    for d in detections {
        w.write_record([
            d.video_id.clone(),
            d.category.to_string(),
            d.start.to_string(),
            d.end.to_string(),
            d.score.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_detections(input: impl Read) -> Result<Vec<DetectedEvent>, CsvError> {
    let mut rdr = csv::Reader::from_reader(input);
    expect_header(&mut rdr, &DETECTION_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let d = DetectedEvent {
            video_id: rec[0].to_string(),
            category: field(&rec, 1, "category")?,
            start: field(&rec, 2, "t_start")?,
            end: field(&rec, 3, "t_end")?,
            score: field(&rec, 4, "score")?,
        };
        if d.start > d.end {
            return Err(parse_err(&rec, format!("t_start {} > t_end {}", d.start, d.end)));
        }
        if !(0.0..=1.0).contains(&d.score) {
            return Err(parse_err(&rec, format!("score {} outside [0, 1]", d.score)));
        }
        out.push(d);
    }
    Ok(out)
}

/// One global anchor of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRow {
    pub video_id: String,
    pub rank: usize,
    pub t: usize,
    pub score: f64,
}

pub fn write_anchors(out: impl Write, rows: &[AnchorRow]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["video_id", "rank", "t", "s"])?;
    for r in rows {
        w.write_record([r.video_id.clone(), r.rank.to_string(), r.t.to_string(), r.score.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_loss_curve(out: impl Write, curve: &[f64]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "mean_loss"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn threshold_label(t: f64) -> String {
    format!("{t:.1}")
}

/// Table layout: a `mAP` row, then one AP row per category. Cells of
/// categories without ground truth are empty.
pub fn write_report(out: impl Write, report: &EvalReport, category_names: &[String]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["row".to_string()];
    header.extend(report.thresholds.iter().map(|&t| threshold_label(t)));
    header.push("Avg.".into());
    w.write_record(&header)?;

    let mut row = vec!["mAP".to_string()];
    row.extend(report.map.iter().map(f64::to_string));
    row.push(report.avg.to_string());
    w.write_record(&row)?;

    for (c, aps) in report.per_category.iter().enumerate() {
        let name = category_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut row = vec![name];
        row.extend(aps.iter().map(|ap| ap.map(|v| v.to_string()).unwrap_or_default()));
        let known: Vec<f64> = aps.iter().flatten().copied().collect();
        row.push(if known.len() == aps.len() && !aps.is_empty() {
            (known.iter().sum::<f64>() / known.len() as f64).to_string()
        } else {
            String::new()
        });
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_report(input: impl Read) -> Result<EvalReport, CsvError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let n = header.len();
    if n < 3 || &header[0] != "row" || &header[n - 1] != "Avg." {
        return Err(CsvError::Parse {
            line: 1,
            msg: "expected header row,<thresholds>,Avg.".into(),
        });
    }
    let thresholds = (1..n - 1)
        .map(|i| {
            header[i].parse::<f64>().map_err(|e| CsvError::Parse {
                line: 1,
                msg: format!("threshold {:?}: {e}", &header[i]),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut records = rdr.records();
    let first = records.next().ok_or(CsvError::Parse {
        line: 2,
        msg: "missing mAP row".into(),
    })??;
    if &first[0] != "mAP" {
        return Err(parse_err(&first, "first row must be mAP"));
    }
    let map = (1..n - 1)
        .map(|i| field(&first, i, &header[i]))
        .collect::<Result<Vec<f64>, _>>()?;
    let avg = field(&first, n - 1, "Avg.")?;

    let mut per_category = Vec::new();
    for rec in records {
        let rec = rec?;
        let aps = (1..n - 1)
            .map(|i| match rec.get(i).map(str::trim) {
                Some("") => Ok(None),
                _ => field(&rec, i, &header[i]).map(Some),
            })
            .collect::<Result<Vec<Option<f64>>, _>>()?;
        per_category.push(aps);
    }
    Ok(EvalReport {
        thresholds,
        map,
        avg,
        per_category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detections_round_trip() {
        let dets = vec![
            DetectedEvent {
                video_id: "vid,1".into(),
                category: 3,
                start: 2,
                end: 9,
                score: 0.1 + 0.2,
            },
            DetectedEvent {
                video_id: "b".into(),
                category: 0,
                start: 0,
                end: 0,
                score: 1.0,
            },
        ];
        let mut buf = Vec::new();
        write_detections(&mut buf, &dets).unwrap();
        assert_eq!(read_detections(buf.as_slice()).unwrap(), dets);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "video_id,category,t_start,t_end,score\na,0,1,2,0.5\nb,x,1,2,0.5\n";
        match read_detections(text.as_bytes()) {
            Err(CsvError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let bad_header = "video,category\n";
        assert!(matches!(read_detections(bad_header.as_bytes()), Err(CsvError::Parse { line: 1, .. })));
    }

    #[test]
    fn report_round_trip() {
        let report = EvalReport {
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            map: vec![0.9, 0.8, 0.7, 0.6, 0.5],
            avg: 0.7,
            per_category: vec![vec![Some(1.0), Some(0.5), Some(0.5), Some(0.25), Some(0.0)], vec![None; 5]],
        };
        let mut buf = Vec::new();
        write_report(&mut buf, &report, &["dog".into(), "car".into()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("row,0.5,0.6,0.7,0.8,0.9,Avg.\nmAP,"));
        assert_eq!(read_report(buf.as_slice()).unwrap(), report);
    }
}
