//! CAN record ingestion: CSV parsing, deduplication, feature selection, and
//! synthetic labeled traffic generation.
//!
//! The canonical input is a decimal CSV with a header row: an arbitration-ID
//! column, eight payload byte columns (`DATA_0`..`DATA_7`, each 0-255), and a
//! six-class label column. A [`ColumnMap`] resolves header names to roles so
//! files with extra columns (`category`, `specific_class`) or a differently
//! named label column parse without preprocessing.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Traffic classes with their stable integer encoding 0-5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Benign = 0,
    Dos = 1,
    Gas = 2,
    Rpm = 3,
    Speed = 4,
    SteeringWheel = 5,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 6] = [
        ClassLabel::Benign,
        ClassLabel::Dos,
        ClassLabel::Gas,
        ClassLabel::Rpm,
        ClassLabel::Speed,
        ClassLabel::SteeringWheel,
    ];

    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Canonical dataset spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Benign => "BENIGN",
            ClassLabel::Dos => "DOS",
            ClassLabel::Gas => "GAS",
            ClassLabel::Rpm => "RPM",
            ClassLabel::Speed => "SPEED",
            ClassLabel::SteeringWheel => "STEERING_WHEEL",
        }
    }

    /// Case-insensitive parse of the six class strings.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BENIGN" => Some(ClassLabel::Benign),
            "DOS" => Some(ClassLabel::Dos),
            "GAS" => Some(ClassLabel::Gas),
            "RPM" => Some(ClassLabel::Rpm),
            "SPEED" => Some(ClassLabel::Speed),
            "STEERING_WHEEL" => Some(ClassLabel::SteeringWheel),
            _ => None,
        }
    }

    pub fn is_attack(self) -> bool {
        self != ClassLabel::Benign
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One decoded CAN message row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CanRecord {
    pub id: u32,
    pub data: [u8; 8],
    pub label: ClassLabel,
}

/// Role a CSV column plays during parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Id,
    DataByte(usize),
    Label,
    Ignore,
}

/// Header-name to role mapping. Matching is case-insensitive; headers not
/// present in the map are ignored.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    roles: BTreeMap<String, ColumnRole>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        let mut map = Self {
            roles: BTreeMap::new(),
        };
        map.assign("ID", ColumnRole::Id);
        for i in 0..8 {
            map.assign(&format!("DATA_{i}"), ColumnRole::DataByte(i));
        }
        map.assign("LABEL", ColumnRole::Label);
        map.assign("CATEGORY", ColumnRole::Ignore);
        map.assign("SPECIFIC_CLASS", ColumnRole::Ignore);
        map
    }
}

impl ColumnMap {
    /// Variant for files where the six-class labels live in
    /// `specific_class` and `label` holds a coarser tag.
    pub fn specific_class_labels() -> Self {
        let mut map = Self::default();
        map.assign("LABEL", ColumnRole::Ignore);
        map.assign("SPECIFIC_CLASS", ColumnRole::Label);
        map
    }

    pub fn assign(&mut self, header: &str, role: ColumnRole) {
        self.roles.insert(header.to_ascii_uppercase(), role);
    }

    fn role_of(&self, header: &str) -> ColumnRole {
        self.roles
            .get(&header.trim().to_ascii_uppercase())
            .copied()
            .unwrap_or(ColumnRole::Ignore)
    }

    /// Maps each header position to its role, verifying that the required
    /// roles (ID, all eight data bytes, label) each resolve exactly once.
    fn resolve(&self, headers: &[String]) -> Result<Vec<ColumnRole>> {
        let roles: Vec<ColumnRole> = headers.iter().map(|h| self.role_of(h)).collect();
        let mut require = |role: ColumnRole, name: &str| {
            let n = roles.iter().filter(|&&r| r == role).count();
            if n == 1 {
                Ok(())
            } else {
                Err(Error::MissingColumn(format!(
                    "{name} (matched {n} columns)"
                )))
            }
        };
        require(ColumnRole::Id, "ID")?;
        for i in 0..8 {
            require(ColumnRole::DataByte(i), &format!("DATA_{i}"))?;
        }
        require(ColumnRole::Label, "label")?;
        Ok(roles)
    }
}

/// Parses decimal CSV records in file order. Fails on the first malformed
/// row, reporting its 1-based line number.
pub fn parse_csv(source: impl Read, column_map: &ColumnMap) -> Result<Vec<CanRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let roles = column_map.resolve(&headers)?;

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("CSV read error: {e}")))?;
        let line = row
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(records.len() + 2);
        records.push(parse_row(&row, &roles, line)?);
    }
    Ok(records)
}

fn parse_row(row: &csv::StringRecord, roles: &[ColumnRole], line: usize) -> Result<CanRecord> {
    if row.len() != roles.len() {
        return Err(Error::Record {
            line,
            message: format!("expected {} fields, found {}", roles.len(), row.len()),
        });
    }
    let mut id = 0u32;
    let mut data = [0u8; 8];
    let mut label = ClassLabel::Benign;
    for (field, role) in row.iter().zip(roles) {
        match role {
            ColumnRole::Id => {
                id = field.parse().map_err(|_| Error::Record {
                    line,
                    message: format!("invalid arbitration ID {field:?}"),
                })?;
            }
            ColumnRole::DataByte(i) => {
                let value: i64 = field.parse().map_err(|_| Error::Record {
                    line,
                    message: format!("invalid DATA_{i} value {field:?}"),
                })?;
                if !(0..=255).contains(&value) {
                    return Err(Error::Record {
                        line,
                        message: format!("DATA_{i} value {value} outside 0-255"),
                    });
                }
                data[*i] = value as u8;
            }
            ColumnRole::Label => {
                label = ClassLabel::parse(field).ok_or_else(|| Error::Record {
                    line,
                    message: format!("unknown label {field:?}"),
                })?;
            }
            ColumnRole::Ignore => {}
        }
    }
    Ok(CanRecord { id, data, label })
}

/// Parses a single header-less CSV line in the canonical column order
/// (ID, DATA_0..DATA_7, label). Used by the streaming detector.
pub fn parse_line(line_text: &str, line: usize) -> Result<CanRecord> {
    let fields: Vec<&str> = line_text.trim().split(',').collect();
    if fields.len() != 10 {
        return Err(Error::Record {
            line,
            message: format!("expected 10 fields, found {}", fields.len()),
        });
    }
    let mut row = csv::StringRecord::new();
    for f in &fields {
        row.push_field(f.trim());
    }
    let mut roles = vec![ColumnRole::Id];
    roles.extend((0..8).map(ColumnRole::DataByte));
    roles.push(ColumnRole::Label);
    parse_row(&row, &roles, line)
}

/// Writes records in the canonical CSV format; output re-parses bit-exactly.
pub fn write_csv(records: &[CanRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["ID".to_string()];
    header.extend((0..8).map(|i| format!("DATA_{i}")));
    header.push("label".into());
    w.write_record(&header)
        .map_err(|e| Error::Data(format!("CSV write error: {e}")))?;
    for r in records {
        let mut row = vec![r.id.to_string()];
        row.extend(r.data.iter().map(|b| b.to_string()));
        row.push(r.label.as_str().to_string());
        w.write_record(&row)
            .map_err(|e| Error::Data(format!("CSV write error: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Removes exact duplicates of the full (id, data, label) tuple, keeping the
/// first occurrence; relative order is preserved. Records equal in bytes but
/// differing in label are both retained.
pub fn deduplicate(records: &[CanRecord]) -> Vec<CanRecord> {
    let mut seen = std::collections::HashSet::with_capacity(records.len());
    records
        .iter()
        .filter(|r| seen.insert(**r))
        .copied()
        .collect()
}

/// Projects records onto the eight payload-byte features (the ID and label
/// columns are not features), returning an `(N, 8)` matrix and the labels.
pub fn select_features(records: &[CanRecord]) -> (Tensor, Vec<ClassLabel>) {
    let mut data = Vec::with_capacity(records.len() * 8);
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        data.extend(r.data.iter().map(|&b| b as f64));
        labels.push(r.label);
    }
    let features = Tensor::new(vec![records.len(), 8], data).expect("bytes are finite");
    (features, labels)
}

/// How a spoofing class manipulates payloads: clone the benign template of
/// `target_id` and overwrite `byte_indices` with `values` (plus a small
/// deterministic jitter).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpoofPattern {
    pub target_id: u32,
    pub byte_indices: Vec<usize>,
    pub values: Vec<u8>,
    pub jitter: u8,
}

/// Configuration for the synthetic traffic generator.
///
/// Defaults model a small vehicle network: a pool of benign IDs whose
/// payloads carry four near-constant identification bytes, two mid-range
/// signal bytes at `DATA_4`/`DATA_5`, and two free-running bytes
/// (`noisy_bytes`) sampled uniformly per record; a DoS flood on a low
/// arbitration ID with a fixed all-zero payload; and four spoofing classes
/// that clone the target ID's benign payload process and overwrite the
/// signal bytes with a distinctive level.
///
/// Spoof records draw the noisy bytes from the same distribution as benign
/// traffic, so full-tuple deduplication does not collapse them. DoS records
/// are byte-identical by design (a fixed flood frame) and do collapse under
/// deduplication; the training pipeline handles that class through weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub counts: BTreeMap<ClassLabel, usize>,
    pub benign_ids: Vec<u32>,
    pub dos_id: u32,
    pub dos_payload: [u8; 8],
    pub spoof: BTreeMap<ClassLabel, SpoofPattern>,
    /// Byte positions sampled uniformly at random per record (benign and
    /// spoofed alike); all other non-overwritten bytes are deterministic
    /// per ID.
    pub noisy_bytes: Vec<usize>,
    /// Attack records are inserted as contiguous bursts of this length.
    pub burst_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let benign_ids = vec![0x110, 0x1A0, 0x220, 0x2C0, 0x330, 0x3D0, 0x440, 0x4F0];
        let spoof_values = [
            (ClassLabel::Gas, [200u8, 20u8]),
            (ClassLabel::Rpm, [210, 240]),
            (ClassLabel::Speed, [230, 160]),
            (ClassLabel::SteeringWheel, [190, 90]),
        ];
        let spoof = spoof_values
            .iter()
            .enumerate()
            .map(|(i, (class, values))| {
                (
                    *class,
                    SpoofPattern {
                        target_id: benign_ids[i % benign_ids.len()],
                        byte_indices: vec![4, 5],
                        values: values.to_vec(),
                        jitter: 3,
                    },
                )
            })
            .collect();
        Self {
            seed: 0,
            counts: BTreeMap::new(),
            benign_ids,
            dos_id: 0x000,
            dos_payload: [0u8; 8],
            spoof,
            noisy_bytes: vec![6, 7],
            burst_len: 64,
        }
    }
}

impl SynthConfig {
    /// Deterministic base payload for a benign arbitration ID. Bytes 0-3 are
    /// near-constant identification bytes, bytes 4-5 mid-range signal bytes,
    /// bytes 6-7 centered placeholders that benign traffic randomizes.
    pub fn benign_template(&self, id: u32) -> [u8; 8] {
        let id = id as u64;
        let mut t = [0u8; 8];
        for (i, b) in t.iter_mut().enumerate().take(4) {
            *b = (60 + (id * 7 + i as u64 * 13) % 9) as u8;
        }
        t[4] = (48 + (id * 13) % 64) as u8;
        t[5] = (48 + (id * 29) % 64) as u8;
        t[6] = 128;
        t[7] = 128;
        t
    }

    fn validate(&self) -> Result<()> {
        let benign_count = self.counts.get(&ClassLabel::Benign).copied().unwrap_or(0);
        if benign_count > 0 && self.benign_ids.is_empty() {
            return Err(Error::Config(
                "synthesize: benign count requested with an empty benign ID pool".into(),
            ));
        }
        for (class, count) in &self.counts {
            if class.is_attack() && *class != ClassLabel::Dos && *count > 0 {
                let pattern = self.spoof.get(class).ok_or_else(|| {
                    Error::Config(format!("synthesize: no spoof pattern for {class}"))
                })?;
                if pattern.byte_indices.iter().any(|&i| i > 7) {
                    return Err(Error::Config(format!(
                        "synthesize: {class} spoof byte index outside 0-7"
                    )));
                }
                if pattern.byte_indices.len() != pattern.values.len() {
                    return Err(Error::Config(format!(
                        "synthesize: {class} byte_indices/values length mismatch"
                    )));
                }
            }
        }
        if self.burst_len == 0 {
            return Err(Error::Config("synthesize: burst_len must be positive".into()));
        }
        Ok(())
    }

    fn sample_noisy_bytes(&self, data: &mut [u8; 8], rng: &mut ChaCha8Rng) {
        for &i in &self.noisy_bytes {
            data[i] = rng.gen();
        }
    }

    fn benign_record(&self, rng: &mut ChaCha8Rng) -> CanRecord {
        let id = self.benign_ids[rng.gen_range(0..self.benign_ids.len())];
        let mut data = self.benign_template(id);
        for i in [4usize, 5] {
            let jitter = rng.gen_range(-12i16..=12);
            data[i] = (data[i] as i16 + jitter).clamp(0, 255) as u8;
        }
        self.sample_noisy_bytes(&mut data, rng);
        CanRecord {
            id,
            data,
            label: ClassLabel::Benign,
        }
    }

    fn attack_record(&self, class: ClassLabel, rng: &mut ChaCha8Rng) -> CanRecord {
        if class == ClassLabel::Dos {
            return CanRecord {
                id: self.dos_id,
                data: self.dos_payload,
                label: ClassLabel::Dos,
            };
        }
        let pattern = &self.spoof[&class];
        let mut data = self.benign_template(pattern.target_id);
        self.sample_noisy_bytes(&mut data, rng);
        for (&i, &v) in pattern.byte_indices.iter().zip(&pattern.values) {
            let jitter = if pattern.jitter > 0 {
                rng.gen_range(-(pattern.jitter as i16)..=pattern.jitter as i16)
            } else {
                0
            };
            data[i] = (v as i16 + jitter).clamp(0, 255) as u8;
        }
        CanRecord {
            id: pattern.target_id,
            data,
            label: class,
        }
    }
}

/// Generates a labeled record stream: a benign background with attack bursts
/// spliced in at random positions. Deterministic for a given config; class
/// counts match the configuration exactly.
pub fn synthesize(config: &SynthConfig) -> Result<Vec<CanRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let benign_count = config.counts.get(&ClassLabel::Benign).copied().unwrap_or(0);
    let mut timeline: Vec<CanRecord> = (0..benign_count)
        .map(|_| config.benign_record(&mut rng))
        .collect();

    for class in ClassLabel::ALL.iter().filter(|c| c.is_attack()) {
        let count = config.counts.get(class).copied().unwrap_or(0);
        let mut remaining = count;
        while remaining > 0 {
            let len = remaining.min(config.burst_len);
            let burst: Vec<CanRecord> = (0..len)
                .map(|_| config.attack_record(*class, &mut rng))
                .collect();
            let at = rng.gen_range(0..=timeline.len());
            timeline.splice(at..at, burst);
            remaining -= len;
        }
    }
    Ok(timeline)
}
