//! Speed-series CSV files.
//!
//! ```text
//! # optional comment lines
//! label,terrain,step_index,speed,unit
//! s01,P,-6,1.4812,m_per_s
//! ```

use std::io::{Read, Write};

use super::{AnalysisError, SpeedSeries, SpeedUnit};

pub const HEADER: [&str; 5] = ["label", "terrain", "step_index", "speed", "unit"];

/// Series read from one file, in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeriesSet {
    pub series: Vec<SpeedSeries>,
    pub warnings: Vec<String>,
}

impl SeriesSet {
    pub fn for_terrain(&self, terrain: &str) -> Vec<&SpeedSeries> {
        self.series
            .iter()
            .filter(|s| s.terrain == terrain)
            .collect()
    }

    pub fn terrains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.series {
            if !out.contains(&s.terrain.as_str()) {
                out.push(&s.terrain);
            }
        }
        out
    }
}

pub fn read_series<R: Read>(reader: R) -> Result<SeriesSet, AnalysisError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => {
            return Ok(SeriesSet {
                series: Vec::new(),
                warnings: vec!["no series found: input is empty".to_string()],
            })
        }
        Some(h) => h.map_err(csv_error)?,
    };
    if header.iter().ne(HEADER) {
        return Err(AnalysisError::MalformedHeader {
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut set = SeriesSet::default();
    let mut unit: Option<SpeedUnit> = None;
    for record in records {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != HEADER.len() {
            return Err(AnalysisError::Row {
                line,
                message: format!("expected {} fields, found {}", HEADER.len(), record.len()),
            });
        }
        let field = |i: usize| &record[i];
        let step: i64 = field(2).parse().map_err(|_| AnalysisError::Row {
            line,
            message: format!("step_index `{}` is not an integer", field(2)),
        })?;
        let speed: f64 = field(3)
            .parse()
            .ok()
            .filter(|x: &f64| x.is_finite())
            .ok_or_else(|| AnalysisError::Row {
                line,
                message: format!("speed `{}` is not a finite number", field(3)),
            })?;
        let row_unit: SpeedUnit = field(4).parse().map_err(|_| AnalysisError::Row {
            line,
            message: format!("unit `{}` is not dimensionless or m_per_s", field(4)),
        })?;
        match unit {
            None => unit = Some(row_unit),
            Some(u) if u != row_unit => return Err(AnalysisError::MixedUnits { line }),
            Some(_) => {}
        }
        let (label, terrain) = (field(0), field(1));
        let existing = set
            .series
            .iter()
            .position(|s| s.label == label && s.terrain == terrain);
        match existing {
            Some(i) => {
                let is_last = i + 1 == set.series.len();
                let s = &mut set.series[i];
                if s.step_indices.last().is_some_and(|&last| step <= last) || !is_last {
                    return Err(AnalysisError::NonMonotone {
                        label: label.to_string(),
                        line,
                    });
                }
                s.step_indices.push(step);
                s.speeds.push(speed);
            }
            None => set.series.push(SpeedSeries {
                label: label.to_string(),
                terrain: terrain.to_string(),
                step_indices: vec![step],
                speeds: vec![speed],
                unit: row_unit,
            }),
        }
    }
    if set.series.is_empty() {
        set.warnings
            .push("no series found: header only".to_string());
    }
    Ok(set)
}

/// Writes series in file order, each preceded by its rows only. Comment
/// lines, if any, go before the header.
pub fn write_series<W: Write>(
    writer: W,
    comments: &[String],
    series: &[SpeedSeries],
) -> Result<(), AnalysisError> {
    let mut writer = writer;
    for c in comments {
        writeln!(writer, "# {c}").map_err(|e| AnalysisError::Io(e.to_string()))?;
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER).map_err(csv_error)?;
    for s in series {
        for (i, v) in s.step_indices.iter().zip(&s.speeds) {
            w.write_record([
                s.label.as_str(),
                s.terrain.as_str(),
                &i.to_string(),
                &v.to_string(),
                s.unit.as_str(),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| AnalysisError::Io(e.to_string()))
}

fn csv_error(e: csv::Error) -> AnalysisError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    AnalysisError::Row {
        line,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
# two subjects on the pyramid
label,terrain,step_index,speed,unit
s1,P,-1,1.50,m_per_s
s1,P,0,1.52,m_per_s
s1,P,1,1.47,m_per_s
s2,P,-1,1.49,m_per_s
s2,P,0,1.55,m_per_s
s2,P,1,1.45,m_per_s
";

    #[test]
    fn fixture_parses_field_exact() {
        let set = read_series(FIXTURE.as_bytes()).unwrap();
        assert!(set.warnings.is_empty());
        assert_eq!(set.series.len(), 2);
        let s2 = &set.series[1];
        assert_eq!(s2.label, "s2");
        assert_eq!(s2.terrain, "P");
        assert_eq!(s2.step_indices, vec![-1, 0, 1]);
        assert_eq!(s2.speeds, vec![1.49, 1.55, 1.45]);
        assert_eq!(s2.unit, SpeedUnit::MetersPerSecond);
        assert_eq!(set.terrains(), vec!["P"]);
    }

    #[test]
    fn round_trip_is_identity() {
        let set = read_series(FIXTURE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_series(&mut buf, &["note".to_string()], &set.series).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# note\nlabel,terrain,step_index,speed,unit\n"));
        let again = read_series(text.as_bytes()).unwrap();
        assert_eq!(again, set);

        let odd = SpeedSeries::new(
            "x",
            "C1",
            vec![0, 2],
            vec![0.1 + 0.2, 1e-17],
            SpeedUnit::Dimensionless,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_series(&mut buf, &[], std::slice::from_ref(&odd)).unwrap();
        assert_eq!(read_series(buf.as_slice()).unwrap().series, vec![odd]);
    }

    #[test]
    fn empty_input_warns() {
        let set = read_series("".as_bytes()).unwrap();
        assert!(set.series.is_empty());
        assert_eq!(set.warnings.len(), 1);
        let set =
            read_series("# nothing\nlabel,terrain,step_index,speed,unit\n".as_bytes()).unwrap();
        assert!(set.series.is_empty());
        assert_eq!(set.warnings.len(), 1);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(matches!(
            read_series("label,terrain,step,speed,unit\n".as_bytes()),
            Err(AnalysisError::MalformedHeader { .. })
        ));
        let mixed =
            "label,terrain,step_index,speed,unit\na,P,0,1,m_per_s\na,P,1,0.4,dimensionless\n";
        assert_eq!(
            read_series(mixed.as_bytes()),
            Err(AnalysisError::MixedUnits { line: 3 })
        );
        let backwards = "label,terrain,step_index,speed,unit\na,P,1,1,m_per_s\na,P,0,1,m_per_s\n";
        assert!(matches!(
            read_series(backwards.as_bytes()),
            Err(AnalysisError::NonMonotone { line: 3, .. })
        ));
        let split = "label,terrain,step_index,speed,unit\na,P,0,1,m_per_s\nb,P,0,1,m_per_s\na,P,1,1,m_per_s\n";
        assert!(matches!(
            read_series(split.as_bytes()),
            Err(AnalysisError::NonMonotone { .. })
        ));
        let bad = "label,terrain,step_index,speed,unit\na,P,zero,1,m_per_s\n";
        assert!(matches!(
            read_series(bad.as_bytes()),
            Err(AnalysisError::Row { line: 2, .. })
        ));
        let unit = "label,terrain,step_index,speed,unit\na,P,0,1,knots\n";
        assert!(matches!(
            read_series(unit.as_bytes()),
            Err(AnalysisError::Row { line: 2, .. })
        ));
    }
}
