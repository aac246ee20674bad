//! Dataset manifests and sequence streaming.
//!
//! A manifest is UTF-8 text. The header line `#labels<TAB>a<TAB>b...` names
//! the label vocabulary; every other non-comment line is
//! `sequence_dir<TAB>label[<TAB>subject]`, with relative directories resolved
//! against the data root (the manifest's directory unless overridden). Each
//! sequence directory holds `frame_0000.png`, `frame_0001.png`, ...

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{augment_x8, load_frame, select_middle_frames, FrameSequence};
use crate::error::{Error, Result};

pub const LABELS_HEADER: &str = "#labels";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub subject: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("split must be train, test or all; got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOptions {
    pub test_fraction: f64,
    pub seed: u64,
    pub subject_disjoint: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            test_fraction: 0.2,
            seed: 0,
            subject_disjoint: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Sorted label names; a label's index is its position here.
    pub labels: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(mut labels: Vec<String>, entries: Vec<ManifestEntry>, root: PathBuf) -> Result<Self> {
        labels.sort();
        labels.dedup();
        let m = DatasetManifest { labels, entries, root };
        for e in &m.entries {
            m.label_index(&e.label)?;
        }
        Ok(m)
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut labels = None;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix(LABELS_HEADER) {
                let names: Vec<String> = rest.split('\t').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
                if names.is_empty() {
                    return Err(Error::Manifest(format!("line {}: empty label vocabulary", lineno + 1)));
                }
                labels = Some(names);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&cols.len()) || cols[0].is_empty() {
                return Err(Error::Manifest(format!(
                    "line {}: expected `path<TAB>label[<TAB>subject]`",
                    lineno + 1
                )));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(cols[0]),
                label: cols[1].to_string(),
                subject: cols.get(2).map(|s| s.to_string()),
            });
        }
        let labels = labels.ok_or_else(|| Error::Manifest(format!("missing `{LABELS_HEADER}` header")))?;
        Self::new(labels, entries, root.to_path_buf())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(LABELS_HEADER);
        for l in &self.labels {
            s.push('\t');
            s.push_str(l);
        }
        s.push('\n');
        for e in &self.entries {
            let _ = write!(s, "{}\t{}", e.path.display(), e.label);
            if let Some(subj) = &e.subject {
                let _ = write!(s, "\t{subj}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .binary_search_by(|l| l.as_str().cmp(label))
            .map_err(|_| Error::Manifest(format!("label `{label}` is not in the vocabulary {:?}", self.labels)))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Disjoint `(train, test)` entry indices, each in manifest order.
    ///
    /// Stratified by label unless `subject_disjoint`, in which case whole
    /// subjects are assigned to one side.
    pub fn split_indices(&self, opts: &SplitOptions) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut test = Vec::new();
        if opts.subject_disjoint {
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, e) in self.entries.iter().enumerate() {
                let key = e.subject.clone().unwrap_or_else(|| e.path.display().to_string());
                groups.entry(key).or_default().push(i);
            }
            let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
            groups.shuffle(&mut rng);
            let want = (self.entries.len() as f64 * opts.test_fraction).round() as usize;
            for g in groups {
                if test.len() >= want {
                    break;
                }
                test.extend(g);
            }
        } else {
            for label in &self.labels {
                let mut idx: Vec<usize> = (0..self.entries.len())
                    .filter(|&i| &self.entries[i].label == label)
                    .collect();
                idx.shuffle(&mut rng);
                let k = (idx.len() as f64 * opts.test_fraction).round() as usize;
                test.extend_from_slice(&idx[..k]);
            }
        }
        test.sort_unstable();
        let train = (0..self.entries.len()).filter(|i| test.binary_search(i).is_err()).collect();
        (train, test)
    }

    pub fn split_entries(&self, split: Split, opts: &SplitOptions) -> Vec<usize> {
        match split {
            Split::All => (0..self.entries.len()).collect(),
            Split::Train => self.split_indices(opts).0,
            Split::Test => self.split_indices(opts).1,
        }
    }
}

/// PNG files of a sequence directory, sorted by name.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Ingestion {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads one sequence directory: middle window of `length` frames, each
/// normalised to `side × side`.
pub fn load_sequence(dir: &Path, label: usize, length: usize, side: usize) -> Result<FrameSequence> {
    let files = frame_files(dir)?;
    let window = select_middle_frames(&files, length)?;
    let frames = window
        .iter()
        .map(|p| load_frame(p, side))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::from_frames(&frames, label, dir.display().to_string())
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub split: SplitOptions,
    pub augment: bool,
    pub sequence_length: usize,
    pub frame_size: usize,
    /// Overrides the manifest directory as the base for relative paths.
    pub data_root: Option<PathBuf>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            split: SplitOptions::default(),
            augment: true,
            sequence_length: super::DEFAULT_SEQUENCE_LENGTH,
            frame_size: 48,
            data_root: None,
        }
    }
}

/// Lazily loaded sequences of one split, in manifest order; augmented
/// variants follow their source sequence.
#[derive(Debug)]
pub struct DatasetStream {
    manifest: DatasetManifest,
    queue: VecDeque<usize>,
    pending: VecDeque<FrameSequence>,
    augment: bool,
    sequence_length: usize,
    frame_size: usize,
}

impl DatasetStream {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Number of sequences the stream will yield in total.
    pub fn expected_len(&self) -> usize {
        self.queue.len() * if self.augment { 8 } else { 1 } + self.pending.len()
    }
}

impl Iterator for DatasetStream {
    type Item = Result<FrameSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(s) = self.pending.pop_front() {
            return Some(Ok(s));
        }
        let i = self.queue.pop_front()?;
        let entry = &self.manifest.entries[i];
        let label = match self.manifest.label_index(&entry.label) {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let dir = self.manifest.resolve(entry);
        let seq = match load_sequence(&dir, label, self.sequence_length, self.frame_size) {
            Ok(s) => s,
            Err(e) => return Some(Err(e)),
        };
        if self.augment {
            self.pending.extend(augment_x8(&seq));
            self.pending.pop_front().map(Ok)
        } else {
            Some(Ok(seq))
        }
    }
}

/// Opens a split of a manifest for streaming. Augmentation applies to the
/// training split only. Missing sequence directories or frames are reported
/// together before anything is streamed.
pub fn load_dataset(manifest_path: &Path, split: Split, opts: &LoadOptions) -> Result<DatasetStream> {
    let mut manifest = DatasetManifest::load(manifest_path)?;
    if let Some(root) = &opts.data_root {
        manifest.root = root.clone();
    }
    stream_manifest(manifest, split, opts)
}

pub fn stream_manifest(manifest: DatasetManifest, split: Split, opts: &LoadOptions) -> Result<DatasetStream> {
    let indices = manifest.split_entries(split, &opts.split);
    let mut missing = Vec::new();
    for &i in &indices {
        let dir = manifest.resolve(&manifest.entries[i]);
        match frame_files(&dir) {
            Ok(files) if !files.is_empty() => {}
            _ => missing.push(dir),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFrames { paths: missing });
    }
    Ok(DatasetStream {
        manifest,
        queue: indices.into(),
        pending: VecDeque::new(),
        augment: opts.augment && split != Split::Test,
        sequence_length: opts.sequence_length,
        frame_size: opts.frame_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n_per: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for l in ["b", "a"] {
            for i in 0..n_per {
                entries.push(ManifestEntry {
                    path: PathBuf::from(format!("{l}{i}")),
                    label: l.into(),
                    subject: Some(format!("s{}", i % 3)),
                });
            }
        }
        DatasetManifest::new(vec!["b".into(), "a".into()], entries, PathBuf::from("/data")).unwrap()
    }

    #[test]
    fn vocabulary_is_sorted() {
        let m = manifest(2);
        assert_eq!(m.labels, vec!["a", "b"]);
        assert_eq!(m.label_index("b").unwrap(), 1);
        assert!(matches!(m.label_index("c"), Err(Error::Manifest(_))));
    }

    #[test]
    fn text_round_trip() {
        let m = manifest(3);
        let again = DatasetManifest::parse(&m.to_text(), Path::new("/data")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let text = "#labels\ta\tb\nx\tc\n";
        assert!(matches!(DatasetManifest::parse(text, Path::new(".")), Err(Error::Manifest(_))));
        assert!(matches!(DatasetManifest::parse("x\ta\n", Path::new(".")), Err(Error::Manifest(_))));
    }

    #[test]
    fn splits_are_disjoint_covering_and_seeded() {
        let m = manifest(10);
        for subject_disjoint in [false, true] {
            let opts = SplitOptions {
                test_fraction: 0.2,
                seed: 4,
                subject_disjoint,
            };
            let (train, test) = m.split_indices(&opts);
            assert_eq!(train.len() + test.len(), m.entries.len());
            assert!(train.iter().all(|i| !test.contains(i)));
            assert_eq!(m.split_indices(&opts), (train.clone(), test.clone()));
            if subject_disjoint {
                let subj = |i: &usize| m.entries[*i].subject.clone();
                assert!(train.iter().all(|i| !test.iter().any(|j| subj(i) == subj(j))));
            } else {
                assert_eq!(test.len(), 4);
            }
        }
    }

    #[test]
    fn empty_manifest_streams_nothing() {
        let m = DatasetManifest::new(vec!["a".into()], vec![], PathBuf::from(".")).unwrap();
        let s = stream_manifest(m, Split::All, &LoadOptions::default()).unwrap();
        assert_eq!(s.count(), 0);
    }

    #[test]
    fn missing_directories_are_listed() {
        let m = manifest(1);
        let err = stream_manifest(m, Split::All, &LoadOptions::default()).unwrap_err();
        match err {
            Error::MissingFrames { paths } => assert_eq!(paths.len(), 2),
            other => panic!("unexpected {other}"),
        }
    }
}
