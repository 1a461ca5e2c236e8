//! Strip data model, historical-data ingestion, column standardization and
//! the speed table mapping strip attributes to STU speed ranges.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Steel density used to derive strip length from weight and geometry, kg/m3.
pub const STEEL_DENSITY: f64 = 7850.0;

/// Names of the six numeric columns, in standardization order.
pub const NUMERIC_COLUMNS: [&str; 6] = [
    "original_width",
    "resulting_width",
    "thickness",
    "weight",
    "coiling_temperature",
    "strips_in_resulting_coil",
];

/// One steel strip record. Widths are millimeters, thickness is stored in
/// 0.01 mm integer units (sub-millimeter gauges stay integral), weight is
/// kilograms, length is meters and derived from mass balance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strip {
    pub grade: usize,
    pub original_width: i64,
    pub resulting_width: i64,
    pub thickness: i64,
    pub weight: i64,
    pub coiling_temperature: f64,
    pub strips_in_coil: f64,
    pub length: f64,
}

impl Strip {
    /// Thickness in millimeters.
    pub fn thickness_mm(&self) -> f64 {
        self.thickness as f64 / 100.0
    }

    /// The six numeric columns in standardization order.
    pub fn numeric_row(&self) -> [f64; 6] {
        [
            self.original_width as f64,
            self.resulting_width as f64,
            self.thickness as f64,
            self.weight as f64,
            self.coiling_temperature,
            self.strips_in_coil,
        ]
    }

    /// Checks the record invariants; `vocab_len` is the grade count (END
    /// excluded).
    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        if self.grade >= vocab_len {
            return Err(Error::RejectedInput(format!("grade id {} outside vocabulary of {vocab_len}", self.grade)));
        }
        if self.original_width <= 0 || self.resulting_width <= 0 || self.thickness <= 0 || self.weight <= 0 {
            return Err(Error::RejectedInput("widths, thickness and weight must be positive".into()));
        }
        if self.resulting_width > self.original_width {
            return Err(Error::RejectedInput(format!(
                "resulting width {} exceeds original width {}",
                self.resulting_width, self.original_width
            )));
        }
        if !(self.length > 0.0) {
            return Err(Error::RejectedInput("length must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered set of unique steel grades plus the END batch-separator token.
/// Grade ids are dense `0..len`; END takes id `len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeVocabulary {
    grades: Vec<String>,
}

impl GradeVocabulary {
    pub const END: &'static str = "<END>";

    pub fn new(grades: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for g in &grades {
            if g == Self::END {
                return Err(Error::Config("a grade may not be named like the END token".into()));
            }
            if !seen.insert(g.clone()) {
                return Err(Error::Config(format!("duplicate grade {g}")));
            }
        }
        Ok(GradeVocabulary { grades })
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    /// Vocabulary size including the END token.
    pub fn len_with_end(&self) -> usize {
        self.grades.len() + 1
    }

    pub fn end_id(&self) -> usize {
        self.grades.len()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.grades.iter().position(|g| g == name)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        if id == self.end_id() {
            Some(Self::END)
        } else {
            self.grades.get(id).map(String::as_str)
        }
    }

    pub fn names(&self) -> &[String] {
        &self.grades
    }
}

/// Per-column moments and observed range of the fitting set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

/// Standardization statistics for the six numeric columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub columns: Vec<ColumnStats>,
}

impl StandardizationStats {
    /// Population moments over the given rows.
    pub fn fit(rows: &[[f64; 6]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::RejectedInput("cannot fit statistics on an empty set".into()));
        }
        let n = rows.len() as f64;
        let mut columns = Vec::with_capacity(6);
        for (c, name) in NUMERIC_COLUMNS.iter().enumerate() {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let min = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
            let max = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            columns.push(ColumnStats { name: name.to_string(), mean, sd, min, max });
        }
        Ok(StandardizationStats { columns })
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.len() != 6 {
            return Err(Error::Config(format!("expected 6 column stats, got {}", self.columns.len())));
        }
        for c in &self.columns {
            if !(c.sd > 0.0) {
                return Err(Error::RejectedInput(format!("column {} has non-positive standard deviation", c.name)));
            }
        }
        Ok(())
    }
}

/// Maps strips to standardized rows: `(x - mean) / sd` per column.
pub fn standardize(strips: &[Strip], stats: &StandardizationStats) -> Result<Vec<[f64; 6]>> {
    stats.validate()?;
    Ok(strips
        .iter()
        .map(|s| {
            let row = s.numeric_row();
            let mut out = [0.0; 6];
            for c in 0..6 {
                out[c] = (row[c] - stats.columns[c].mean) / stats.columns[c].sd;
            }
            out
        })
        .collect())
}

/// Inverse of [`standardize`] on raw numeric rows.
pub fn destandardize(rows: &[[f64; 6]], stats: &StandardizationStats) -> Result<Vec<[f64; 6]>> {
    stats.validate()?;
    Ok(rows
        .iter()
        .map(|r| {
            let mut out = [0.0; 6];
            for c in 0..6 {
                out[c] = r[c] * stats.columns[c].sd + stats.columns[c].mean;
            }
            out
        })
        .collect())
}

/// One speed-table rule: inclusive ranges over width (mm) and thickness (mm)
/// plus an optional grade set. `grades: None` matches every grade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRule {
    pub width_mm: (f64, f64),
    pub thickness_mm: (f64, f64),
    pub grades: Option<Vec<String>>,
    pub v_min: f64,
    pub v_max: f64,
}

impl SpeedRule {
    fn matches(&self, strip: &Strip, grade_name: &str) -> bool {
        let w = strip.original_width as f64;
        let t = strip.thickness_mm();
        let in_ranges = w >= self.width_mm.0 && w <= self.width_mm.1 && t >= self.thickness_mm.0 && t <= self.thickness_mm.1;
        let grade_ok = match &self.grades {
            None => true,
            Some(set) => set.iter().any(|g| g == grade_name),
        };
        in_ranges && grade_ok
    }
}

/// Admissible STU speed ranges per strip attribute combination. On overlap
/// the tightest bounds win: max of the matching v_min, min of the v_max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedTable {
    pub rows: Vec<SpeedRule>,
}

impl SpeedTable {
    pub fn new(rows: Vec<SpeedRule>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.v_min > r.v_max {
                return Err(Error::Config(format!("speed rule {i}: v_min {} > v_max {}", r.v_min, r.v_max)));
            }
        }
        Ok(SpeedTable { rows })
    }

    /// Synthetic default: a global 30-220 m/min range tightened for wide,
    /// thick and alloyed strips. The real plant table is proprietary; this
    /// one is fully overridable from config.
    pub fn synthetic_default() -> Self {
        let rule = |w: (f64, f64), t: (f64, f64), grades: Option<Vec<&str>>, v_min: f64, v_max: f64| SpeedRule {
            width_mm: w,
            thickness_mm: t,
            grades: grades.map(|g| g.into_iter().map(String::from).collect()),
            v_min,
            v_max,
        };
        SpeedTable {
            rows: vec![
                rule((0.0, f64::MAX), (0.0, f64::MAX), None, 30.0, 220.0),
                rule((1400.0, f64::MAX), (0.0, f64::MAX), None, 30.0, 190.0),
                rule((1650.0, f64::MAX), (0.0, f64::MAX), None, 30.0, 160.0),
                rule((0.0, f64::MAX), (4.0, f64::MAX), None, 30.0, 180.0),
                rule((0.0, f64::MAX), (6.0, f64::MAX), None, 30.0, 140.0),
                rule((0.0, f64::MAX), (0.0, f64::MAX), Some(vec!["X70", "HC340"]), 30.0, 170.0),
            ],
        }
    }

    /// The tightest (v_min, v_max) pair over all rules matching the strip.
    pub fn cap(&self, strip: &Strip, vocab: &GradeVocabulary) -> Result<(f64, f64)> {
        let grade_name = vocab
            .name_of(strip.grade)
            .ok_or_else(|| Error::Config(format!("grade id {} not in vocabulary", strip.grade)))?;
        let mut bounds: Option<(f64, f64)> = None;
        for rule in &self.rows {
            if rule.matches(strip, grade_name) {
                bounds = Some(match bounds {
                    None => (rule.v_min, rule.v_max),
                    Some((lo, hi)) => (lo.max(rule.v_min), hi.min(rule.v_max)),
                });
            }
        }
        match bounds {
            Some((lo, hi)) if lo <= hi => Ok((lo, hi)),
            Some((lo, hi)) => Err(Error::Config(format!(
                "speed table rules conflict for grade {grade_name}, width {}, thickness {}: v_min {lo} > v_max {hi}",
                strip.original_width,
                strip.thickness_mm()
            ))),
            None => Err(Error::Config(format!(
                "no speed-table row matches grade {grade_name}, width {} mm, thickness {} mm",
                strip.original_width,
                strip.thickness_mm()
            ))),
        }
    }
}

/// Length derivation parameters: steel density and the clamp window for
/// outliers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LengthModel {
    pub density: f64,
    pub min_m: f64,
    pub max_m: f64,
}

impl Default for LengthModel {
    fn default() -> Self {
        LengthModel { density: STEEL_DENSITY, min_m: 30.0, max_m: 5000.0 }
    }
}

/// Strip length from mass balance: `weight / (density * width * thickness)`,
/// clamped to the configured window.
pub fn derive_length(width_mm: i64, thickness_units: i64, weight_kg: i64, model: &LengthModel) -> f64 {
    let width_m = width_mm as f64 / 1000.0;
    let thickness_m = thickness_units as f64 * 1e-5;
    let raw = weight_kg as f64 / (model.density * width_m * thickness_m);
    raw.clamp(model.min_m, model.max_m)
}

/// Column mapping for ingestion. Values are header names in the input file;
/// thickness is read in millimeters and stored in 0.01 mm units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSchema {
    pub grade: String,
    pub original_width: String,
    pub resulting_width: String,
    pub thickness: String,
    pub weight: String,
    pub coiling_temperature: String,
    pub strips_in_resulting_coil: String,
    pub length_model: LengthModel,
}

impl Default for IngestSchema {
    fn default() -> Self {
        IngestSchema {
            grade: "grade".into(),
            original_width: "original_width".into(),
            resulting_width: "resulting_width".into(),
            thickness: "thickness".into(),
            weight: "weight".into(),
            coiling_temperature: "coiling_temperature".into(),
            strips_in_resulting_coil: "strips_in_resulting_coil".into(),
            length_model: LengthModel::default(),
        }
    }
}

/// Result of an ingestion run: accepted strips, the vocabulary in first-seen
/// order, fitted statistics and per-row diagnostics for rejected lines.
#[derive(Clone, Debug)]
pub struct IngestReport {
    pub strips: Vec<Strip>,
    pub vocabulary: GradeVocabulary,
    pub stats: StandardizationStats,
    pub rejected: Vec<(usize, String)>,
}

/// Parses a comma-delimited history file (header row required) into strips.
/// Rows violating the record invariants are rejected with row-level
/// diagnostics; the remaining rows feed the vocabulary and statistics.
pub fn ingest_history(path: &Path, schema: &IngestSchema) -> Result<IngestReport> {
    let text = std::fs::read_to_string(path)?;
    ingest_history_str(&text, schema)
}

pub fn ingest_history_str(text: &str, schema: &IngestSchema) -> Result<IngestReport> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() || l.starts_with('#') => continue,
            Some((_, l)) => break l,
            None => return Err(Error::Parse("empty input file".into())),
        }
    };
    let headers: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Parse(format!("missing column '{name}' in header")))
    };
    let c_grade = col(&schema.grade)?;
    let c_ow = col(&schema.original_width)?;
    let c_rw = col(&schema.resulting_width)?;
    let c_th = col(&schema.thickness)?;
    let c_wt = col(&schema.weight)?;
    let c_ct = col(&schema.coiling_temperature)?;
    let c_sc = col(&schema.strips_in_resulting_coil)?;

    let mut grades: Vec<String> = Vec::new();
    let mut grade_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut strips = Vec::new();
    let mut rejected = Vec::new();

    for (line_no, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let row = line_no + 1;
        let parse = |idx: usize, what: &str| -> std::result::Result<f64, String> {
            fields
                .get(idx)
                .ok_or_else(|| format!("missing field {what}"))?
                .parse::<f64>()
                .map_err(|_| format!("non-numeric {what} '{}'", fields[idx]))
        };
        let build = || -> std::result::Result<(String, Strip), String> {
            let grade_name = fields.get(c_grade).ok_or("missing grade field")?.to_string();
            if grade_name.is_empty() {
                return Err("empty grade".into());
            }
            let ow = parse(c_ow, "original width")?;
            let rw = parse(c_rw, "resulting width")?;
            let th_mm = parse(c_th, "thickness")?;
            let wt = parse(c_wt, "weight")?;
            let ct = parse(c_ct, "coiling temperature")?;
            let sc = parse(c_sc, "strips in resulting coil")?;
            let strip = Strip {
                grade: 0, // patched once the vocabulary id is known
                original_width: ow.round() as i64,
                resulting_width: rw.round() as i64,
                thickness: (th_mm * 100.0).round() as i64,
                weight: wt.round() as i64,
                coiling_temperature: ct,
                strips_in_coil: sc,
                length: 0.0,
            };
            Ok((grade_name, strip))
        };
        match build() {
            Ok((grade_name, mut strip)) => {
                strip.length = derive_length(strip.original_width, strip.thickness, strip.weight, &schema.length_model);
                strip.grade = *grade_ids.entry(grade_name.clone()).or_insert_with(|| {
                    grades.push(grade_name.clone());
                    grades.len() - 1
                });
                if let Err(e) = strip.validate(grades.len()) {
                    rejected.push((row, e.to_string()));
                    continue;
                }
                strips.push(strip);
            }
            Err(msg) => rejected.push((row, msg)),
        }
    }

    if strips.is_empty() {
        return Err(Error::RejectedInput(format!("no valid rows in input ({} rejected)", rejected.len())));
    }
    // drop grades that only appeared on rejected rows, re-densifying ids
    let mut used = vec![false; grades.len()];
    for s in &strips {
        used[s.grade] = true;
    }
    if used.iter().any(|u| !u) {
        let mut remap = vec![usize::MAX; grades.len()];
        let mut kept = Vec::new();
        for (i, g) in grades.into_iter().enumerate() {
            if used[i] {
                remap[i] = kept.len();
                kept.push(g);
            }
        }
        for s in &mut strips {
            s.grade = remap[s.grade];
        }
        grades = kept;
    }

    let rows: Vec<[f64; 6]> = strips.iter().map(Strip::numeric_row).collect();
    let stats = StandardizationStats::fit(&rows)?;
    Ok(IngestReport { strips, vocabulary: GradeVocabulary::new(grades)?, stats, rejected })
}

pub const DATASET_VERSION: u32 = 1;

/// On-disk dataset: `dataset.json` (version + counts), `strips.csv`,
/// `vocabulary.txt` (one grade per line, END implicit) and `stats.csv`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub strips: Vec<Strip>,
    pub vocabulary: GradeVocabulary,
    pub stats: StandardizationStats,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::json!({
            "version": DATASET_VERSION,
            "strips": self.strips.len(),
            "grades": self.vocabulary.len(),
        });
        std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta).unwrap())?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("strips.csv"))?);
        writeln!(f, "grade,original_width,resulting_width,thickness,weight,coiling_temperature,strips_in_resulting_coil,length")?;
        for s in &self.strips {
            let name = self.vocabulary.name_of(s.grade).unwrap_or("?");
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                name, s.original_width, s.resulting_width, s.thickness, s.weight, s.coiling_temperature, s.strips_in_coil, s.length
            )?;
        }
        f.flush()?;

        let vocab_text: String = self.vocabulary.names().join("\n");
        std::fs::write(dir.join("vocabulary.txt"), vocab_text + "\n")?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("stats.csv"))?);
        writeln!(f, "column,mean,sd,min,max")?;
        for c in &self.stats.columns {
            writeln!(f, "{},{},{},{},{}", c.name, c.mean, c.sd, c.min, c.max)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)
            .map_err(|e| Error::Parse(format!("dataset.json: {e}")))?;
        let version = meta.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != DATASET_VERSION as u64 {
            return Err(Error::Parse(format!("unsupported dataset version {version}")));
        }

        let vocab_text = std::fs::read_to_string(dir.join("vocabulary.txt"))?;
        let vocabulary = GradeVocabulary::new(vocab_text.lines().filter(|l| !l.is_empty()).map(String::from).collect())?;

        let stats_text = std::fs::read_to_string(dir.join("stats.csv"))?;
        let mut columns = Vec::new();
        for line in stats_text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Parse(format!("stats.csv: bad row '{line}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("stats.csv: bad number '{s}'")));
            columns.push(ColumnStats {
                name: parts[0].to_string(),
                mean: num(parts[1])?,
                sd: num(parts[2])?,
                min: num(parts[3])?,
                max: num(parts[4])?,
            });
        }
        let stats = StandardizationStats { columns };
        stats.validate()?;

        let strips_text = std::fs::read_to_string(dir.join("strips.csv"))?;
        let mut strips = Vec::new();
        for (i, line) in strips_text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 8 {
                return Err(Error::Parse(format!("strips.csv row {}: expected 8 fields", i + 1)));
            }
            let grade = vocabulary
                .id_of(parts[0])
                .ok_or_else(|| Error::Parse(format!("strips.csv row {}: grade '{}' not in vocabulary", i + 1, parts[0])))?;
            let int = |s: &str| s.parse::<i64>().map_err(|_| Error::Parse(format!("strips.csv: bad integer '{s}'")));
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("strips.csv: bad number '{s}'")));
            strips.push(Strip {
                grade,
                original_width: int(parts[1])?,
                resulting_width: int(parts[2])?,
                thickness: int(parts[3])?,
                weight: int(parts[4])?,
                coiling_temperature: num(parts[5])?,
                strips_in_coil: num(parts[6])?,
                length: num(parts[7])?,
            });
        }
        Ok(Dataset { strips, vocabulary, stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip(grade: usize, ow: i64, th: i64, wt: i64) -> Strip {
        Strip {
            grade,
            original_width: ow,
            resulting_width: ow,
            thickness: th,
            weight: wt,
            coiling_temperature: 600.0,
            strips_in_coil: 1.0,
            length: derive_length(ow, th, wt, &LengthModel::default()),
        }
    }

    #[test]
    fn ingest_three_valid_rows() {
        let text = "grade,original_width,resulting_width,thickness,weight,coiling_temperature,strips_in_resulting_coil\n\
                    A,1200,1190,2.5,18000,620,1\n\
                    B,1300,1300,3.0,21000,640,1.5\n\
                    A,1200,1195,2.5,17500,615,1\n";
        let report = ingest_history_str(text, &IngestSchema::default()).unwrap();
        assert_eq!(report.strips.len(), 3);
        assert_eq!(report.vocabulary.names(), &["A".to_string(), "B".to_string()]);
        assert!(report.rejected.is_empty());
        assert_eq!(report.strips[0].thickness, 250);
    }

    #[test]
    fn ingest_rejects_bad_rows_keeps_rest() {
        let text = "grade,original_width,resulting_width,thickness,weight,coiling_temperature,strips_in_resulting_coil\n\
                    A,1200,1250,2.5,18000,620,1\n\
                    B,1300,1300,3.0,21000,640,1\n\
                    C,1300,1300,3.0,abc,640,1\n";
        let report = ingest_history_str(text, &IngestSchema::default()).unwrap();
        assert_eq!(report.strips.len(), 1);
        assert_eq!(report.rejected.len(), 2);
        assert_eq!(report.vocabulary.names(), &["B".to_string()]);
        assert!(report.rejected[0].1.contains("resulting width"));
        assert!(report.rejected[1].1.contains("non-numeric"));
    }

    #[test]
    fn ingest_is_idempotent() {
        let text = "grade,original_width,resulting_width,thickness,weight,coiling_temperature,strips_in_resulting_coil\n\
                    A,1200,1190,2.5,18000,620,1\n\
                    B,1300,1300,3.0,21000,640,1.5\n";
        let a = ingest_history_str(text, &IngestSchema::default()).unwrap();
        let b = ingest_history_str(text, &IngestSchema::default()).unwrap();
        assert_eq!(a.strips, b.strips);
        assert_eq!(a.vocabulary, b.vocabulary);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn population_moments_match_hand_computation() {
        // column values {2, 4, 6}: mean 4, population sd sqrt(8/3)
        let rows = vec![[2.0; 6], [4.0; 6], [6.0; 6]];
        let stats = StandardizationStats::fit(&rows).unwrap();
        for c in &stats.columns {
            assert!((c.mean - 4.0).abs() < 1e-12);
            assert!((c.sd - 1.632993).abs() < 1e-6);
        }
    }

    #[test]
    fn standardize_centers_and_scales() {
        let rows = vec![[2.0; 6], [4.0; 6], [6.0; 6]];
        let stats = StandardizationStats::fit(&rows).unwrap();
        // a strip sitting exactly at the mean standardizes to zero everywhere
        let s = Strip {
            grade: 0,
            original_width: 4,
            resulting_width: 4,
            thickness: 4,
            weight: 4,
            coiling_temperature: 4.0,
            strips_in_coil: 4.0,
            length: 1.0,
        };
        let z = standardize(&[s], &stats).unwrap();
        assert!(z[0].iter().all(|v| v.abs() < 1e-12));

        // and the {2,4,6} column maps to -1.2247, 0, +1.2247
        let sd = stats.columns[0].sd;
        assert!(((2.0 - 4.0) / sd + 1.2247).abs() < 1e-4);
        assert!(((6.0 - 4.0) / sd - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn standardize_roundtrip_on_random_strips() {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(5);
        let strips: Vec<Strip> = (0..100)
            .map(|_| {
                let ow = rng.gen_range(900..1800);
                let mut s = strip(0, ow, rng.gen_range(150..800), rng.gen_range(8000..30000));
                s.coiling_temperature = rng.gen_range(550.0..700.0);
                s.strips_in_coil = rng.gen_range(1.0..3.0);
                s
            })
            .collect();
        let rows: Vec<[f64; 6]> = strips.iter().map(Strip::numeric_row).collect();
        let stats = StandardizationStats::fit(&rows).unwrap();
        let z = standardize(&strips, &stats).unwrap();
        let back = destandardize(&z, &stats).unwrap();
        for (orig, b) in rows.iter().zip(&back) {
            for c in 0..6 {
                assert!((orig[c] - b[c]).abs() < 1e-9);
            }
        }
        for c in 0..6 {
            let n = z.len() as f64;
            let mean = z.iter().map(|r| r[c]).sum::<f64>() / n;
            let sd = (z.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_sd_stats_are_rejected() {
        let rows = vec![[1.0; 6], [1.0; 6]];
        let stats = StandardizationStats::fit(&rows).unwrap();
        assert!(standardize(&[], &stats).is_err());
    }

    #[test]
    fn speed_cap_single_rule() {
        let vocab = GradeVocabulary::new(vec!["A".into()]).unwrap();
        let table = SpeedTable::new(vec![SpeedRule {
            width_mm: (0.0, f64::MAX),
            thickness_mm: (0.0, f64::MAX),
            grades: None,
            v_min: 30.0,
            v_max: 200.0,
        }])
        .unwrap();
        assert_eq!(table.cap(&strip(0, 1200, 250, 18000), &vocab).unwrap(), (30.0, 200.0));
    }

    #[test]
    fn speed_cap_tightest_wins() {
        let vocab = GradeVocabulary::new(vec!["A".into()]).unwrap();
        let table = SpeedTable::new(vec![
            SpeedRule { width_mm: (0.0, f64::MAX), thickness_mm: (0.0, f64::MAX), grades: None, v_min: 30.0, v_max: 200.0 },
            SpeedRule { width_mm: (1000.0, 1500.0), thickness_mm: (0.0, f64::MAX), grades: None, v_min: 40.0, v_max: 150.0 },
        ])
        .unwrap();
        assert_eq!(table.cap(&strip(0, 1200, 250, 18000), &vocab).unwrap(), (40.0, 150.0));
    }

    #[test]
    fn speed_cap_no_match_is_config_error() {
        let vocab = GradeVocabulary::new(vec!["A".into()]).unwrap();
        let table = SpeedTable::new(vec![SpeedRule {
            width_mm: (0.0, 1000.0),
            thickness_mm: (0.0, f64::MAX),
            grades: None,
            v_min: 30.0,
            v_max: 200.0,
        }])
        .unwrap();
        let err = table.cap(&strip(0, 1200, 250, 18000), &vocab).unwrap_err();
        assert!(err.to_string().contains("1200"));
    }

    #[test]
    fn speed_cap_matches_brute_force_scan() {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(71);
        let vocab = GradeVocabulary::new(vec!["A".into(), "B".into(), "C".into()]).unwrap();
        let mut rules =
            vec![SpeedRule { width_mm: (0.0, f64::MAX), thickness_mm: (0.0, f64::MAX), grades: None, v_min: 30.0, v_max: 220.0 }];
        for _ in 0..19 {
            let w0 = rng.gen_range(800.0..1500.0);
            let t0 = rng.gen_range(1.0..5.0);
            rules.push(SpeedRule {
                width_mm: (w0, w0 + rng.gen_range(100.0..600.0)),
                thickness_mm: (t0, t0 + rng.gen_range(0.5..3.0)),
                grades: if rng.gen::<bool>() { None } else { Some(vec!["A".into(), "C".into()]) },
                v_min: rng.gen_range(30.0..50.0),
                v_max: rng.gen_range(120.0..220.0),
            });
        }
        let table = SpeedTable::new(rules.clone()).unwrap();
        for _ in 0..100 {
            let s = strip(rng.gen_range(0..3), rng.gen_range(800..2000), rng.gen_range(100..700), 15000);
            let name = vocab.name_of(s.grade).unwrap();
            let matching: Vec<&SpeedRule> = rules.iter().filter(|r| r.matches(&s, name)).collect();
            let expected_min = matching.iter().map(|r| r.v_min).fold(f64::NEG_INFINITY, f64::max);
            let expected_max = matching.iter().map(|r| r.v_max).fold(f64::INFINITY, f64::min);
            match table.cap(&s, &vocab) {
                Ok((lo, hi)) => {
                    assert_eq!(lo, expected_min);
                    assert_eq!(hi, expected_max);
                }
                Err(_) => assert!(matching.is_empty() || expected_min > expected_max),
            }
        }
    }

    #[test]
    fn removing_a_rule_never_lowers_vmax() {
        let vocab = GradeVocabulary::new(vec!["A".into()]).unwrap();
        let rules = vec![
            SpeedRule { width_mm: (0.0, f64::MAX), thickness_mm: (0.0, f64::MAX), grades: None, v_min: 30.0, v_max: 220.0 },
            SpeedRule { width_mm: (1000.0, 1500.0), thickness_mm: (0.0, f64::MAX), grades: None, v_min: 30.0, v_max: 150.0 },
        ];
        let full = SpeedTable::new(rules.clone()).unwrap();
        let reduced = SpeedTable::new(vec![rules[0].clone()]).unwrap();
        // a strip the removed rule never matched keeps its cap
        let narrow = strip(0, 900, 250, 15000);
        assert_eq!(full.cap(&narrow, &vocab).unwrap().1, reduced.cap(&narrow, &vocab).unwrap().1);
        // a matched strip's cap can only rise
        let wide = strip(0, 1200, 250, 15000);
        assert!(reduced.cap(&wide, &vocab).unwrap().1 >= full.cap(&wide, &vocab).unwrap().1);
    }

    #[test]
    fn derive_length_direct_substitution() {
        // width 1 m, thickness 0.002 m, weight 7850 kg -> 500 m
        let model = LengthModel::default();
        let l = derive_length(1000, 200, 7850, &model);
        assert!((l - 500.0).abs() < 1e-9);
        // weight halved -> length halved
        let half = derive_length(1000, 200, 3925, &model);
        assert!((half - 250.0).abs() < 1e-9);
    }

    #[test]
    fn derive_length_matches_mass_balance_oracle() {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(17);
        let model = LengthModel { density: 7850.0, min_m: 0.0, max_m: f64::MAX };
        for _ in 0..10 {
            let w = rng.gen_range(800..2000);
            let t = rng.gen_range(100..800);
            let kg = rng.gen_range(5000..40000);
            let l = derive_length(w, t, kg, &model);
            let oracle = kg as f64 / (7850.0 * (w as f64 * 1e-3) * (t as f64 * 1e-5));
            assert!((l - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn derive_length_monotonicity() {
        let model = LengthModel { density: 7850.0, min_m: 0.0, max_m: f64::MAX };
        let base = derive_length(1200, 250, 18000, &model);
        assert!(derive_length(1200, 250, 19000, &model) > base);
        assert!(derive_length(1300, 250, 18000, &model) < base);
        assert!(derive_length(1200, 300, 18000, &model) < base);
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = std::env::temp_dir().join(format!("pickline-ds-{}", std::process::id()));
        let mut a = strip(0, 1200, 250, 18000);
        a.coiling_temperature = 615.0;
        a.strips_in_coil = 1.0;
        let mut b = strip(1, 1300, 300, 21000);
        b.coiling_temperature = 645.0;
        b.strips_in_coil = 2.0;
        let strips = vec![a, b];
        let rows: Vec<[f64; 6]> = strips.iter().map(Strip::numeric_row).collect();
        let ds = Dataset {
            strips,
            vocabulary: GradeVocabulary::new(vec!["A".into(), "B".into()]).unwrap(),
            stats: StandardizationStats::fit(&rows).unwrap(),
        };
        ds.save(&dir).unwrap();
        let loaded = Dataset::load(&dir).unwrap();
        assert_eq!(loaded.strips, ds.strips);
        assert_eq!(loaded.vocabulary, ds.vocabulary);
        assert_eq!(loaded.stats, ds.stats);
        std::fs::remove_dir_all(&dir).ok();
    }
}
