//! Manifest and feature-store ingestion, geometry features, dataset
//! subsampling rules, class-disjoint splits, and synthetic data generation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, SplitMix64};

/// Sentinel class id for unlabeled records.
pub const UNLABELED: u32 = 0xFFFF_FFFF;

/// Reference canvas side used by the geometry features and preprocessing.
pub const TARGET_SIDE: u32 = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Unknown,
    Apparel,
    Packaged,
    Toy,
    Other,
}

impl Category {
    pub fn to_u8(self) -> u8 {
        match self {
            Category::Unknown => 0,
            Category::Apparel => 1,
            Category::Packaged => 2,
            Category::Toy => 3,
            Category::Other => 4,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Category::Unknown,
            1 => Category::Apparel,
            2 => Category::Packaged,
            3 => Category::Toy,
            4 => Category::Other,
            _ => return Err(Error::Format(format!("invalid category byte {v}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image's id, label, pixel dimensions, category, and backbone feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub image_id: String,
    pub class_id: u32,
    pub width: u16,
    pub height: u16,
    pub category: Category,
    pub feature: Vec<f32>,
}

/// Id-unique ordered collection of feature records sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub dimension: u32,
    pub records: Vec<FeatureRecord>,
}

impl FeatureStore {
    /// Validates the store invariants: unique ids, matching feature
    /// lengths, finite components, nonzero pixel dimensions.
    pub fn new(dimension: u32, records: Vec<FeatureRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.image_id.is_empty() {
                return Err(Error::Domain("empty image_id".into()));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateId(r.image_id.clone()));
            }
            if r.feature.len() != dimension as usize {
                return Err(Error::Domain(format!(
                    "record {:?} has feature length {} but store dimension is {}",
                    r.image_id,
                    r.feature.len(),
                    dimension
                )));
            }
            if r.width == 0 || r.height == 0 {
                return Err(Error::Domain(format!(
                    "record {:?} has zero pixel dimension",
                    r.image_id
                )));
            }
            if r.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "record {:?} has non-finite feature components",
                    r.image_id
                )));
            }
        }
        drop(seen);
        Ok(Self { dimension, records })
    }

    pub fn get(&self, image_id: &str) -> Option<&FeatureRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub class_id: u32,
    pub dataset_name: String,
    pub width: u16,
    pub height: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn category_or_unknown(&self) -> Category {
        self.category.unwrap_or(Category::Unknown)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct class ids in ascending order.
    pub fn class_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Entry count per class.
    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.class_id).or_insert(0) += 1;
        }
        counts
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses a JSONL manifest: one object per line, UTF-8, ids unique.
/// Blank lines are skipped; errors carry the 1-based line number.
pub fn parse_manifest(text: &[u8]) -> Result<Manifest> {
    let text = std::str::from_utf8(text)
        .map_err(|e| Error::Parse { line: 0, msg: format!("invalid UTF-8: {e}") })?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if entry.image_id.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty image_id".into() });
        }
        if !seen.insert(entry.image_id.clone()) {
            return Err(Error::DuplicateId(entry.image_id));
        }
        entries.push(entry);
    }
    Ok(Manifest { entries })
}

// --- binary feature file (GUIEFEAT) ------------------------------------

const FEAT_MAGIC: &[u8; 8] = b"GUIEFEAT";
const FEAT_VERSION: u16 = 1;

/// Serializes a store into the GUIEFEAT container (little-endian,
/// layout documented in docs/FORMATS.md).
pub fn write_feature_file(store: &FeatureStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&store.dimension.to_le_bytes());
    out.extend_from_slice(&(store.records.len() as u64).to_le_bytes());
    for r in &store.records {
        let id = r.image_id.as_bytes();
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&r.class_id.to_le_bytes());
        out.extend_from_slice(&r.width.to_le_bytes());
        out.extend_from_slice(&r.height.to_le_bytes());
        out.push(r.category.to_u8());
        for v in &r.feature {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a GUIEFEAT file. Round-trips `write_feature_file` bit-exactly.
pub fn read_feature_file(bytes: &[u8]) -> Result<FeatureStore> {
    let mut c = Cursor::new(bytes);
    if c.take(8)? != FEAT_MAGIC {
        return Err(Error::Format("bad magic: not a GUIEFEAT file".into()));
    }
    let version = c.u16()?;
    if version != FEAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported GUIEFEAT version {version} (expected {FEAT_VERSION})"
        )));
    }
    let dimension = c.u32()?;
    let count = c.u64()?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let id_len = c.u16()? as usize;
        let id = std::str::from_utf8(c.take(id_len)?)
            .map_err(|e| Error::Format(format!("invalid UTF-8 image_id: {e}")))?
            .to_string();
        let class_id = c.u32()?;
        let width = c.u16()?;
        let height = c.u16()?;
        let category = Category::from_u8(c.u8()?)?;
        let mut feature = Vec::with_capacity(dimension as usize);
        for _ in 0..dimension {
            feature.push(c.f32()?);
        }
        records.push(FeatureRecord {
            image_id: id,
            class_id,
            width,
            height,
            category,
            feature,
        });
    }
    if c.remaining() != 0 {
        return Err(Error::Format(format!(
            "trailing bytes: {} unread after last record",
            c.remaining()
        )));
    }
    FeatureStore::new(dimension, records)
}

pub(crate) use Cursor as ByteCursor;

// --- geometry features --------------------------------------------------

/// `[height/224, width/224, width/height]` with real division.
pub fn geometry_features(width: u16, height: u16) -> Result<[f64; 3]> {
    if width == 0 || height == 0 {
        return Err(Error::Domain("geometry_features requires width, height >= 1".into()));
    }
    let w = width as f64;
    let h = height as f64;
    Ok([h / TARGET_SIDE as f64, w / TARGET_SIDE as f64, w / h])
}

// --- subsampling rules --------------------------------------------------

/// Keeps only entries of classes with at least `min_samples` entries.
pub fn filter_min_class_size(manifest: &Manifest, min_samples: usize) -> Manifest {
    let counts = manifest.class_counts();
    Manifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| counts[&e.class_id] >= min_samples)
            .cloned()
            .collect(),
    }
}

/// Uniform sample of `n_classes` distinct classes; all entries of the
/// chosen classes are kept in manifest order.
pub fn sample_classes(manifest: &Manifest, n_classes: usize, seed: u64) -> Result<Manifest> {
    let classes = manifest.class_ids();
    if n_classes > classes.len() {
        return Err(Error::Domain(format!(
            "requested {n_classes} classes but manifest has {}",
            classes.len()
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let chosen: HashSet<u32> = rng
        .sample_indices(classes.len(), n_classes)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    Ok(Manifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| chosen.contains(&e.class_id))
            .cloned()
            .collect(),
    })
}

/// Caps each class at `cap` entries, chosen uniformly without replacement.
/// Classes are processed in ascending class id so the draw order is fixed.
pub fn cap_per_class(manifest: &Manifest, cap: usize, seed: u64) -> Manifest {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class.entry(e.class_id).or_default().push(i);
    }
    let mut rng = SplitMix64::new(seed);
    let mut keep = vec![false; manifest.entries.len()];
    for positions in by_class.values() {
        if positions.len() <= cap {
            for &p in positions {
                keep[p] = true;
            }
        } else {
            for i in rng.sample_indices(positions.len(), cap) {
                keep[positions[i]] = true;
            }
        }
    }
    Manifest {
        entries: manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| keep[*i])
            .map(|(_, e)| e.clone())
            .collect(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub zeroshot_class_count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Manifest,
    pub val: Manifest,
    pub zeroshot_test: Manifest,
}

/// Class-disjoint split: `zeroshot_class_count` whole classes go to the
/// test set; the remaining classes are split per-class into train/val by
/// `train_fraction` (ceil for train). Entry order follows the input.
pub fn make_splits(manifest: &Manifest, spec: &SplitSpec) -> Result<Splits> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "train_fraction {} outside (0, 1]",
            spec.train_fraction
        )));
    }
    let classes = manifest.class_ids();
    if spec.zeroshot_class_count >= classes.len() {
        return Err(Error::Domain(format!(
            "zeroshot_class_count {} needs more than {} classes",
            spec.zeroshot_class_count,
            classes.len()
        )));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let test_classes: HashSet<u32> = rng
        .sample_indices(classes.len(), spec.zeroshot_class_count)
        .into_iter()
        .map(|i| classes[i])
        .collect();

    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class.entry(e.class_id).or_default().push(i);
    }

    let mut assignment: Vec<Split> = vec![Split::Train; manifest.entries.len()];
    for (class, positions) in &by_class {
        if test_classes.contains(class) {
            for &p in positions {
                assignment[p] = Split::Test;
            }
            continue;
        }
        let mut order = positions.clone();
        rng.shuffle(&mut order);
        let n_train = (spec.train_fraction * positions.len() as f64).ceil() as usize;
        for (rank, &p) in order.iter().enumerate() {
            assignment[p] = if rank < n_train { Split::Train } else { Split::Val };
        }
    }

    let collect = |which: Split| Manifest {
        entries: manifest
            .entries
            .iter()
            .zip(&assignment)
            .filter(|(_, a)| **a == which)
            .map(|(e, a)| {
                let mut e = e.clone();
                e.split = Some(*a);
                e
            })
            .collect(),
    };
    Ok(Splits {
        train: collect(Split::Train),
        val: collect(Split::Val),
        zeroshot_test: collect(Split::Test),
    })
}

// --- synthetic data -----------------------------------------------------

const SYNTH_SIDES: [u16; 3] = [224, 336, 448];

/// Gaussian-cluster synthetic dataset for desk-scale verification.
///
/// Class centers are standard Gaussian scaled by `separation`; samples add
/// unit-variance Gaussian noise. Widths and heights are drawn independently
/// from {224, 336, 448} so both square and non-square shapes occur.
pub fn gen_synthetic(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> (FeatureStore, Manifest) {
    assert!(n_classes >= 1 && per_class >= 1 && dim >= 1);
    assert!(separation >= 0.0);
    let mut rng = SplitMix64::new(mix_seed(seed, 0));
    let mut centers = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let c: Vec<f64> = (0..dim).map(|_| separation * rng.next_gauss()).collect();
        centers.push(c);
    }
    let mut records = Vec::with_capacity(n_classes * per_class);
    let mut entries = Vec::with_capacity(n_classes * per_class);
    for (class, center) in centers.iter().enumerate() {
        for s in 0..per_class {
            let width = SYNTH_SIDES[rng.next_below(3) as usize];
            let height = SYNTH_SIDES[rng.next_below(3) as usize];
            let feature: Vec<f32> = center
                .iter()
                .map(|c| (c + rng.next_gauss()) as f32)
                .collect();
            let image_id = format!("c{class:04}_s{s:04}");
            records.push(FeatureRecord {
                image_id: image_id.clone(),
                class_id: class as u32,
                width,
                height,
                category: Category::Unknown,
                feature,
            });
            entries.push(ManifestEntry {
                image_id,
                class_id: class as u32,
                dataset_name: "synth".into(),
                width,
                height,
                category: None,
                split: None,
            });
        }
    }
    let store = FeatureStore::new(dim as u32, records).expect("synthetic store is valid");
    (store, Manifest { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: &str, class: u32) -> ManifestEntry {
        ManifestEntry {
            image_id: id.into(),
            class_id: class,
            dataset_name: "t".into(),
            width: 224,
            height: 224,
            category: None,
            split: None,
        }
    }

    fn manifest_of(counts: &[(u32, usize)]) -> Manifest {
        let mut entries = Vec::new();
        for &(class, n) in counts {
            for i in 0..n {
                entries.push(entry(&format!("c{class}_{i}"), class));
            }
        }
        Manifest { entries }
    }

    #[test]
    fn parse_minimal_record_defaults_category() {
        let m = parse_manifest(
            br#"{"image_id":"a","class_id":3,"dataset_name":"synth","width":224,"height":224}"#,
        )
        .unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.entries[0].category, None);
        assert_eq!(m.entries[0].category_or_unknown(), Category::Unknown);
    }

    #[test]
    fn parse_empty_input() {
        assert_eq!(parse_manifest(b"").unwrap().len(), 0);
    }

    #[test]
    fn parse_duplicate_id_rejected() {
        let text = br#"{"image_id":"a","class_id":1,"dataset_name":"d","width":1,"height":1}
{"image_id":"a","class_id":2,"dataset_name":"d","width":1,"height":1}"#;
        match parse_manifest(text) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn parse_malformed_line_reports_number() {
        let text = b"{\"image_id\":\"a\",\"class_id\":1,\"dataset_name\":\"d\",\"width\":1,\"height\":1}\nnot json";
        match parse_manifest(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn feature_file_empty_store_roundtrip() {
        let store = FeatureStore::new(1024, vec![]).unwrap();
        let bytes = write_feature_file(&store);
        assert_eq!(read_feature_file(&bytes).unwrap(), store);
    }

    #[test]
    fn feature_file_roundtrip_bit_exact() {
        let store = FeatureStore::new(
            2,
            vec![FeatureRecord {
                image_id: "x".into(),
                class_id: 7,
                width: 300,
                height: 200,
                category: Category::Toy,
                feature: vec![1.5, -2.25],
            }],
        )
        .unwrap();
        let bytes = write_feature_file(&store);
        let back = read_feature_file(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.records[0].feature[0].to_bits(), 1.5f32.to_bits());
    }

    #[test]
    fn feature_file_bad_magic() {
        let store = FeatureStore::new(2, vec![]).unwrap();
        let mut bytes = write_feature_file(&store);
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_feature_file(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn feature_file_truncated() {
        let store = FeatureStore::new(
            3,
            vec![FeatureRecord {
                image_id: "x".into(),
                class_id: 0,
                width: 1,
                height: 1,
                category: Category::Unknown,
                feature: vec![0.0, 1.0, 2.0],
            }],
        )
        .unwrap();
        let bytes = write_feature_file(&store);
        assert!(read_feature_file(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn geometry_unit_and_ratios() {
        assert_eq!(geometry_features(224, 224).unwrap(), [1.0, 1.0, 1.0]);
        assert_eq!(geometry_features(448, 224).unwrap(), [1.0, 2.0, 2.0]);
        assert_eq!(geometry_features(672, 448).unwrap(), [2.0, 3.0, 1.5]);
        assert!(geometry_features(0, 10).is_err());
    }

    #[test]
    fn filter_boundary_at_threshold() {
        let m = manifest_of(&[(1, 50), (2, 49)]);
        let f = filter_min_class_size(&m, 50);
        assert_eq!(f.len(), 50);
        assert!(f.entries.iter().all(|e| e.class_id == 1));
        // idempotence
        assert_eq!(filter_min_class_size(&f, 50), f);
        // vacuous filter
        assert_eq!(filter_min_class_size(&m, 1), m);
        assert_eq!(filter_min_class_size(&Manifest::default(), 5).len(), 0);
    }

    #[test]
    fn sample_classes_exhaustive_and_deterministic() {
        let m = manifest_of(&[(1, 2), (2, 2), (3, 2)]);
        assert_eq!(sample_classes(&m, 3, 99).unwrap(), m);
        let a = sample_classes(&m, 2, 5).unwrap();
        let b = sample_classes(&m, 2, 5).unwrap();
        assert_eq!(a, b);
        assert!(sample_classes(&m, 4, 0).is_err());
    }

    #[test]
    fn sample_classes_singletons() {
        let m = manifest_of(&(0..10).map(|c| (c, 1)).collect::<Vec<_>>());
        let s = sample_classes(&m, 4, 7).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.class_ids().len(), 4);
    }

    #[test]
    fn cap_per_class_limits_and_determinism() {
        let m = manifest_of(&[(1, 31), (2, 10)]);
        let c = cap_per_class(&m, 30, 3);
        let counts = c.class_counts();
        assert_eq!(counts[&1], 30);
        assert_eq!(counts[&2], 10);
        assert_eq!(cap_per_class(&m, 30, 3), c);
        assert_eq!(cap_per_class(&m, 40, 3), m);
        // subset of input
        let input_ids: HashSet<_> = m.entries.iter().map(|e| &e.image_id).collect();
        assert!(c.entries.iter().all(|e| input_ids.contains(&e.image_id)));
    }

    #[test]
    fn make_splits_arithmetic() {
        let m = manifest_of(&[(1, 10), (2, 10), (3, 10), (4, 10), (5, 10)]);
        let s = make_splits(
            &m,
            &SplitSpec { train_fraction: 0.8, zeroshot_class_count: 1, seed: 11 },
        )
        .unwrap();
        assert_eq!(s.zeroshot_test.len(), 10);
        assert_eq!(s.zeroshot_test.class_ids().len(), 1);
        for (_, n) in s.train.class_counts() {
            assert_eq!(n, 8);
        }
        for (_, n) in s.val.class_counts() {
            assert_eq!(n, 2);
        }
    }

    #[test]
    fn make_splits_zero_zeroshot() {
        let m = manifest_of(&[(1, 4), (2, 4)]);
        let s = make_splits(
            &m,
            &SplitSpec { train_fraction: 0.5, zeroshot_class_count: 0, seed: 0 },
        )
        .unwrap();
        assert!(s.zeroshot_test.is_empty());
    }

    #[test]
    fn make_splits_class_disjoint_many_seeds() {
        let m = manifest_of(&[(1, 5), (2, 5), (3, 5), (4, 5), (5, 5), (6, 5)]);
        for seed in 0..100u64 {
            let s = make_splits(
                &m,
                &SplitSpec { train_fraction: 0.6, zeroshot_class_count: 2, seed },
            )
            .unwrap();
            let test: HashSet<u32> = s.zeroshot_test.class_ids().into_iter().collect();
            let trainval: HashSet<u32> = s
                .train
                .class_ids()
                .into_iter()
                .chain(s.val.class_ids())
                .collect();
            assert!(test.is_disjoint(&trainval), "seed {seed}");
            // partition of image_ids
            let mut all: Vec<&String> = s
                .train
                .entries
                .iter()
                .chain(&s.val.entries)
                .chain(&s.zeroshot_test.entries)
                .map(|e| &e.image_id)
                .collect();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), m.len());
        }
    }

    #[test]
    fn synthetic_cardinality_and_determinism() {
        let (store, manifest) = gen_synthetic(2, 3, 4, 10.0, 5);
        assert_eq!(store.records.len(), 6);
        assert_eq!(store.dimension, 4);
        assert_eq!(manifest.class_ids(), vec![0, 1]);
        let (store2, manifest2) = gen_synthetic(2, 3, 4, 10.0, 5);
        assert_eq!(store, store2);
        assert_eq!(manifest, manifest2);
    }

    #[test]
    fn synthetic_zero_separation_centers_collapse() {
        let (store, _) = gen_synthetic(4, 50, 8, 0.0, 2);
        // class-conditional means should all be near the origin
        for class in 0..4u32 {
            let rows: Vec<&FeatureRecord> =
                store.records.iter().filter(|r| r.class_id == class).collect();
            for d in 0..8 {
                let mean: f64 =
                    rows.iter().map(|r| r.feature[d] as f64).sum::<f64>() / rows.len() as f64;
                assert!(mean.abs() < 0.6, "class {class} dim {d} mean {mean}");
            }
        }
    }

    proptest! {
        #[test]
        fn feature_file_roundtrip_random(
            dim in 1usize..6,
            n in 0usize..8,
            seed in 0u64..1000,
        ) {
            let mut rng = SplitMix64::new(seed);
            let records: Vec<FeatureRecord> = (0..n).map(|i| FeatureRecord {
                image_id: format!("id{i}"),
                class_id: rng.next_u64() as u32,
                width: 1 + rng.next_below(1000) as u16,
                height: 1 + rng.next_below(1000) as u16,
                category: Category::from_u8(rng.next_below(5) as u8).unwrap(),
                feature: (0..dim).map(|_| rng.next_gauss() as f32).collect(),
            }).collect();
            let store = FeatureStore::new(dim as u32, records).unwrap();
            let back = read_feature_file(&write_feature_file(&store)).unwrap();
            prop_assert_eq!(back, store);
        }

        #[test]
        fn cap_never_exceeds(cap in 1usize..6, seed in 0u64..100) {
            let m = manifest_of(&[(1, 9), (2, 3), (3, 1)]);
            let c = cap_per_class(&m, cap, seed);
            for (_, n) in c.class_counts() {
                prop_assert!(n <= cap);
            }
        }
    }
}
