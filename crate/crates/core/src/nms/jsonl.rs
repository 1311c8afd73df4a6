//! JSON-lines detection files.
//!
//! Input lines look like
//! `{"x1":0,"y1":0,"x2":4,"y2":4,"score":0.9,"class":0,"image":"a.jpg"}`
//! where `image` is optional. Output lines repeat the input record and add
//! `adjusted_score`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{suppress_multiclass_indexed, DetBox, Kept, NMSSimilarConfig, SuppressionStats, Variant};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct InputRecord {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
    class: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Serialize)]
struct OutputRecord<'a> {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
    class: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<&'a str>,
    adjusted_score: f64,
}

/// One parsed line.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: DetBox,
    pub image: Option<String>,
}

/// Parse a JSONL stream. Blank lines are skipped; line numbers in errors are
/// 1-based.
pub fn read_detections<R: BufRead>(reader: R) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

fn parse_line(line: &str, lineno: usize) -> Result<Detection> {
    let parse_err = |message: String| Error::Parse { line: lineno, message };
    let rec: InputRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let bbox = DetBox::new(rec.x1, rec.y1, rec.x2, rec.y2, rec.score, rec.class).map_err(|e| parse_err(e.to_string()))?;
    Ok(Detection { bbox, image: rec.image })
}

/// A survivor tied back to its input line.
#[derive(Clone, Debug, PartialEq)]
pub struct Survivor {
    /// Position in the parsed detection list.
    pub index: usize,
    pub adjusted_score: f64,
}

/// Suppress each image independently (in parallel), classes within an image
/// independently. Survivors are grouped by image in first-appearance order,
/// then by adjusted score.
pub fn suppress_detections(
    dets: &[Detection],
    variant: Variant,
    cfg: &NMSSimilarConfig,
) -> Result<(Vec<Survivor>, SuppressionStats)> {
    cfg.validate()?;
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: BTreeMap<Option<&str>, usize> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        let g = *slot.entry(d.image.as_deref()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let results: Vec<Result<(Vec<Kept>, SuppressionStats)>> = groups
        .par_iter()
        .map(|members| {
            let boxes: Vec<DetBox> = members.iter().map(|&i| dets[i].bbox).collect();
            suppress_multiclass_indexed(&boxes, variant, cfg)
        })
        .collect();
    let mut survivors = Vec::new();
    let mut stats = SuppressionStats::default();
    for (members, res) in groups.iter().zip(results) {
        let (kept, s) = res?;
        stats.merge(&s);
        survivors.extend(kept.into_iter().map(|k| Survivor {
            index: members[k.index],
            adjusted_score: k.score,
        }));
    }
    Ok((survivors, stats))
}

pub fn write_survivors<W: Write>(mut writer: W, dets: &[Detection], survivors: &[Survivor]) -> Result<()> {
    for s in survivors {
        let d = &dets[s.index];
        let rec = OutputRecord {
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
            score: d.bbox.score,
            class: d.bbox.class_id,
            image: d.image.as_deref(),
            adjusted_score: s.adjusted_score,
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_detections<W: Write>(mut writer: W, dets: &[Detection]) -> Result<()> {
    for d in dets {
        let rec = InputRecord {
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
            score: d.bbox.score,
            class: d.bbox.class_id,
            image: d.image.clone(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_skips_blank_lines() {
        let text = "{\"x1\":0,\"y1\":0,\"x2\":4,\"y2\":4,\"score\":0.9,\"class\":1}\n\n\
                    {\"x1\":1,\"y1\":1,\"x2\":2,\"y2\":3,\"score\":0.5,\"class\":0,\"image\":\"a\"}\n";
        let dets = read_detections(text.as_bytes()).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].bbox.class_id, 1);
        assert_eq!(dets[1].image.as_deref(), Some("a"));
    }

    #[test]
    fn errors_name_the_line() {
        let text = "{\"x1\":0,\"y1\":0,\"x2\":4,\"y2\":4,\"score\":0.9,\"class\":1}\n\nnot json\n";
        match read_detections(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let degenerate = "{\"x1\":0,\"y1\":0,\"x2\":0,\"y2\":4,\"score\":0.9,\"class\":1}\n";
        assert!(matches!(read_detections(degenerate.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn images_are_suppressed_separately() {
        let b = DetBox::new(0.0, 0.0, 4.0, 4.0, 0.9, 0).unwrap();
        let dets = vec![
            Detection { bbox: b, image: Some("a".into()) },
            Detection { bbox: b.with_score(0.8), image: Some("b".into()) },
            Detection { bbox: b.with_score(0.7), image: Some("a".into()) },
        ];
        let (s, stats) = suppress_detections(&dets, Variant::Hard, &NMSSimilarConfig::default()).unwrap();
        let idx: Vec<usize> = s.iter().map(|s| s.index).collect();
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(stats.hard_removals, 1);
    }

    #[test]
    fn output_round_trips_through_reader() {
        let b = DetBox::new(0.5, 1.0, 4.0, 4.25, 0.9, 3).unwrap();
        let dets = vec![Detection { bbox: b, image: None }];
        let mut buf = Vec::new();
        write_detections(&mut buf, &dets).unwrap();
        assert_eq!(read_detections(&buf[..]).unwrap(), dets);

        let mut out = Vec::new();
        write_survivors(&mut out, &dets, &[Survivor { index: 0, adjusted_score: 0.25 }]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(v["adjusted_score"], 0.25);
        assert_eq!(v["score"], 0.9);
    }
}
