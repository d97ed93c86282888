//! Walk recordings, diagnosis labels, and the text formats they travel in.
//!
//! Walk files are plain text with one sample per line and 19
//! whitespace-delimited columns: time in seconds, then 8 left-foot and 8
//! right-foot sensor forces, then the two total forces (all Newtons).
//! The filename convention `<StudyPrefix><Group><SubjectNum>_<WalkNum>.txt`
//! with group `Pt` or `Co` carries the identity, e.g. `GaPt07_01.txt`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::{HctError, Result};

/// Number of force channels per walk: 8 sensors per foot plus one total
/// per foot.
pub const SENSOR_COUNT: usize = 18;

/// Hoehn & Yahr stage handled by the pipeline; controls carry `Zero`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HyStage {
    Zero,
    Two,
    TwoPointFive,
    Three,
}

impl HyStage {
    /// Parses a stage number; only 2, 2.5 and 3 are PD stages.
    pub fn from_value(v: f64) -> Option<HyStage> {
        if v == 2.0 {
            Some(HyStage::Two)
        } else if v == 2.5 {
            Some(HyStage::TwoPointFive)
        } else if v == 3.0 {
            Some(HyStage::Three)
        } else {
            None
        }
    }

    /// Class index used by the staging head: 2 -> 0, 2.5 -> 1, 3 -> 2.
    pub fn staging_class(self) -> Option<usize> {
        match self {
            HyStage::Zero => None,
            HyStage::Two => Some(0),
            HyStage::TwoPointFive => Some(1),
            HyStage::Three => Some(2),
        }
    }

    pub fn from_staging_class(class: usize) -> Option<HyStage> {
        match class {
            0 => Some(HyStage::Two),
            1 => Some(HyStage::TwoPointFive),
            2 => Some(HyStage::Three),
            _ => None,
        }
    }
}

impl fmt::Display for HyStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HyStage::Zero => write!(f, "0"),
            HyStage::Two => write!(f, "2"),
            HyStage::TwoPointFive => write!(f, "2.5"),
            HyStage::Three => write!(f, "3"),
        }
    }
}

/// Subject diagnosis: PD flag plus H&Y stage.
///
/// Constructors enforce the pairing: controls are stage zero, PD subjects
/// carry one of the three handled stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiagnosisLabel {
    pub is_pd: bool,
    pub hy_stage: HyStage,
}

impl DiagnosisLabel {
    pub fn control() -> Self {
        DiagnosisLabel {
            is_pd: false,
            hy_stage: HyStage::Zero,
        }
    }

    pub fn pd(stage: HyStage) -> Result<Self> {
        if stage == HyStage::Zero {
            return Err(HctError::Validation(
                "PD label requires stage 2, 2.5 or 3".into(),
            ));
        }
        Ok(DiagnosisLabel {
            is_pd: true,
            hy_stage: stage,
        })
    }

    /// 0/1 label for the detection task.
    pub fn detection_class(&self) -> usize {
        usize::from(self.is_pd)
    }

    /// Index in the composed four-class space: 0 = healthy, 1..=3 = the
    /// H&Y stages 2, 2.5, 3.
    pub fn four_class(&self) -> usize {
        match self.hy_stage.staging_class() {
            None => 0,
            Some(stage) => stage + 1,
        }
    }
}

/// One recorded walk: 18 time-aligned force signals plus identity.
#[derive(Debug, Clone)]
pub struct WalkRecord {
    pub subject_id: String,
    pub walk_id: String,
    /// Samples per second, inferred from the time column (expected 100).
    pub sample_rate: f32,
    signals: Vec<Vec<f32>>,
    pub label: Option<DiagnosisLabel>,
}

impl WalkRecord {
    pub fn new(
        subject_id: String,
        walk_id: String,
        sample_rate: f32,
        signals: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if signals.len() != SENSOR_COUNT {
            return Err(HctError::Validation(format!(
                "walk needs {SENSOR_COUNT} signals, got {}",
                signals.len()
            )));
        }
        let len = signals[0].len();
        if len == 0 {
            return Err(HctError::Validation("walk signals are empty".into()));
        }
        if signals.iter().any(|s| s.len() != len) {
            return Err(HctError::Validation("signal lengths differ".into()));
        }
        Ok(WalkRecord {
            subject_id,
            walk_id,
            sample_rate,
            signals,
            label: None,
        })
    }

    pub fn signals(&self) -> &[Vec<f32>] {
        &self.signals
    }

    pub fn len(&self) -> usize {
        self.signals[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub(crate) fn with_signals(&self, signals: Vec<Vec<f32>>) -> WalkRecord {
        WalkRecord {
            subject_id: self.subject_id.clone(),
            walk_id: self.walk_id.clone(),
            sample_rate: self.sample_rate,
            signals,
            label: self.label,
        }
    }
}

/// Splits `GaPt07_01.txt` into subject id `GaPt07` and walk id `01`.
pub fn parse_walk_filename(filename: &str) -> Result<(String, String)> {
    let stem = filename
        .strip_suffix(".txt")
        .ok_or_else(|| HctError::Format(format!("{filename}: expected .txt walk file")))?;
    let (subject, walk) = stem.rsplit_once('_').ok_or_else(|| {
        HctError::Format(format!("{filename}: expected <Subject>_<Walk>.txt"))
    })?;
    let group_ok = subject.contains("Pt") || subject.contains("Co");
    if subject.is_empty() || walk.is_empty() || !group_ok {
        return Err(HctError::Format(format!(
            "{filename}: subject id must embed group Pt or Co"
        )));
    }
    if !walk.chars().all(|c| c.is_ascii_digit()) {
        return Err(HctError::Format(format!(
            "{filename}: walk number {walk} is not numeric"
        )));
    }
    Ok((subject.to_string(), walk.to_string()))
}

/// Parses one walk file: 19 numeric columns per line, time first.
///
/// The label stays unset; it is joined from the metadata table later.
pub fn parse_walk_file(bytes: &[u8], filename: &str) -> Result<WalkRecord> {
    let (subject_id, walk_id) = parse_walk_filename(filename)?;
    let text = std::str::from_utf8(bytes)
        .map_err(|_| HctError::Format(format!("{filename}: not valid UTF-8 text")))?;

    let mut times: Vec<f64> = Vec::new();
    let mut signals: Vec<Vec<f32>> = vec![Vec::new(); SENSOR_COUNT];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != SENSOR_COUNT + 1 {
            return Err(HctError::Format(format!(
                "{filename}:{}: expected {} columns, found {}",
                lineno + 1,
                SENSOR_COUNT + 1,
                fields.len()
            )));
        }
        let mut parsed = fields.iter().enumerate().map(|(col, f)| {
            f.parse::<f64>().map_err(|_| {
                HctError::Format(format!(
                    "{filename}:{}: column {} is not numeric: {f:?}",
                    lineno + 1,
                    col + 1
                ))
            })
        });
        let t = parsed.next().expect("time column")?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(HctError::Format(format!(
                    "{filename}:{}: time {t} not strictly increasing after {prev}",
                    lineno + 1
                )));
            }
        }
        times.push(t);
        for (signal, value) in signals.iter_mut().zip(parsed) {
            signal.push(value? as f32);
        }
    }
    if times.is_empty() {
        return Err(HctError::Format(format!("{filename}: no samples")));
    }
    let sample_rate = if times.len() >= 2 {
        let span = times[times.len() - 1] - times[0];
        ((times.len() - 1) as f64 / span) as f32
    } else {
        100.0
    };
    WalkRecord::new(subject_id, walk_id, sample_rate, signals)
}

/// Writes a walk in the same 19-column text format, synthesizing the time
/// column from the sample rate. Values print in shortest-roundtrip form,
/// so a parse of the output reproduces them exactly.
pub fn write_walk_file(walk: &WalkRecord, mut out: impl Write) -> Result<()> {
    for t in 0..walk.len() {
        write!(out, "{}", t as f64 / walk.sample_rate as f64)?;
        for s in walk.signals() {
            write!(out, "\t{}", s[t])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Column names of the label metadata table.
#[derive(Debug, Clone)]
pub struct LabelColumns {
    pub subject: String,
    pub group: String,
    pub stage: String,
}

impl Default for LabelColumns {
    fn default() -> Self {
        LabelColumns {
            subject: "ID".into(),
            group: "Group".into(),
            stage: "HoehnYahr".into(),
        }
    }
}

/// Result of loading the label table: the usable labels plus the subjects
/// that had to be dropped, with reasons.
#[derive(Debug, Clone)]
pub struct LoadedLabels {
    pub labels: BTreeMap<String, DiagnosisLabel>,
    pub excluded: Vec<(String, String)>,
}

fn is_pd_group(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "pd" | "pt" | "parkinson" | "parkinsons" => Some(true),
        "2" | "co" | "control" | "healthy" | "hc" => Some(false),
        _ => None,
    }
}

/// Loads the delimited label table (tab or comma, detected from the
/// header). Controls with a missing stage become stage zero; PD subjects
/// with a stage outside {2, 2.5, 3} are excluded with a warning.
pub fn load_labels(table: &str, columns: &LabelColumns) -> Result<LoadedLabels> {
    let mut lines = table.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| HctError::Format("label table is empty".into()))?;
    let delim = if header.contains('\t') { '\t' } else { ',' };
    let names: Vec<&str> = header.split(delim).map(str::trim).collect();
    let col = |name: &str| -> Result<usize> {
        names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| HctError::Format(format!("label table lacks column {name:?}")))
    };
    let subject_col = col(&columns.subject)?;
    let group_col = col(&columns.group)?;
    let stage_col = col(&columns.stage)?;

    let mut labels = BTreeMap::new();
    let mut excluded = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        let get = |c: usize| fields.get(c).copied().unwrap_or("");
        let subject = get(subject_col);
        if subject.is_empty() {
            continue;
        }
        let group = get(group_col);
        let is_pd = is_pd_group(group).ok_or_else(|| {
            HctError::Format(format!(
                "label table line {}: unknown group {group:?}",
                lineno + 2
            ))
        })?;
        let stage_raw = get(stage_col);
        let stage_value = stage_raw.parse::<f64>().ok().filter(|v| v.is_finite());

        let label = if is_pd {
            match stage_value.and_then(HyStage::from_value) {
                Some(stage) => DiagnosisLabel::pd(stage)?,
                None => {
                    let reason = format!("PD subject with H&Y stage {stage_raw:?} outside {{2, 2.5, 3}}");
                    log::warn!("excluding {subject}: {reason}");
                    excluded.push((subject.to_string(), reason));
                    continue;
                }
            }
        } else {
            // missing H&Y values of controls are zero by definition
            DiagnosisLabel::control()
        };
        if labels.insert(subject.to_string(), label).is_some() {
            return Err(HctError::Format(format!(
                "duplicate subject {subject:?} in label table"
            )));
        }
    }
    Ok(LoadedLabels { labels, excluded })
}

/// Joins labels onto walks; returns the labeled walks and the subject ids
/// of walks that had no label row.
pub fn apply_labels(
    walks: Vec<WalkRecord>,
    labels: &BTreeMap<String, DiagnosisLabel>,
) -> (Vec<WalkRecord>, Vec<String>) {
    let mut labeled = Vec::with_capacity(walks.len());
    let mut unlabeled = Vec::new();
    for mut walk in walks {
        match labels.get(&walk.subject_id) {
            Some(&label) => {
                walk.label = Some(label);
                labeled.push(walk);
            }
            None => {
                log::warn!("no label for subject {}", walk.subject_id);
                unlabeled.push(walk.subject_id.clone());
            }
        }
    }
    (labeled, unlabeled)
}

/// Reads and parses one walk file from disk.
pub fn read_walk_file(path: &Path) -> Result<WalkRecord> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| HctError::Format(format!("{}: bad filename", path.display())))?;
    let bytes = std::fs::read(path)?;
    parse_walk_file(&bytes, name)
}
