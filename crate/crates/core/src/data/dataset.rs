use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    load_features, load_motion, load_template, DataError, FeatureSequence, MotionSequence,
    NeutralTemplate,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train|val|test)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Named, sorted, duplicate-free set of vertex indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    name: String,
    indices: Vec<usize>,
}

impl RegionSet {
    pub fn new(name: impl Into<String>, indices: &[usize], vertices: usize) -> Result<Self, DataError> {
        let name = name.into();
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(DataError::Invalid(format!("region {name}: duplicate indices")));
        }
        if let Some(&bad) = sorted.last().filter(|&&i| i >= vertices) {
            return Err(DataError::Invalid(format!(
                "region {name}: index {bad} out of range for {vertices} vertices"
            )));
        }
        Ok(Self {
            name,
            indices: sorted,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub speaker: usize,
    pub features: String,
    pub motion: String,
    pub split: Split,
}

/// JSON dataset index. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub template: String,
    pub speakers: usize,
    pub entries: Vec<ManifestEntry>,
    pub lip_indices: Vec<usize>,
    pub upper_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub upper_lip_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lower_lip_indices: Vec<usize>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| DataError::io(path, e))
    }

    /// Checks speaker ids and region sets against a vertex count.
    pub fn validate(&self, vertices: usize) -> Result<(), DataError> {
        if let Some(e) = self.entries.iter().find(|e| e.speaker >= self.speakers) {
            return Err(DataError::Invalid(format!(
                "speaker {} out of range for {} speakers",
                e.speaker, self.speakers
            )));
        }
        let lip = RegionSet::new("lip", &self.lip_indices, vertices)?;
        let upper = RegionSet::new("upper", &self.upper_indices, vertices)?;
        if lip.indices().iter().any(|i| upper.indices().binary_search(i).is_ok()) {
            return Err(DataError::Invalid("lip and upper-face regions overlap".into()));
        }
        RegionSet::new("upper_lip", &self.upper_lip_indices, vertices)?;
        RegionSet::new("lower_lip", &self.lower_lip_indices, vertices)?;
        Ok(())
    }
}

/// One paired sequence.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub speaker: usize,
    pub split: Split,
    pub features: FeatureSequence,
    pub motion: MotionSequence,
}

/// A manifest with every referenced file loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub template: NeutralTemplate,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, DataError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let template = load_template(root.join(&manifest.template))?;
        let v = template.vertex_count();
        manifest.validate(v)?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for (index, e) in manifest.entries.iter().enumerate() {
            let features = load_features(root.join(&e.features))?;
            let motion = load_motion(root.join(&e.motion))?;
            if motion.vertices() != v {
                return Err(DataError::VertexMismatch {
                    template: v,
                    motion: motion.vertices(),
                });
            }
            samples.push(Sample {
                index,
                speaker: e.speaker,
                split: e.split,
                features,
                motion,
            });
        }
        if let Some(dim) = samples.first().map(|s| s.features.dim()) {
            if samples.iter().any(|s| s.features.dim() != dim) {
                return Err(DataError::Invalid("feature widths differ across entries".into()));
            }
        }
        Ok(Self {
            manifest,
            root,
            template,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn vertices(&self) -> usize {
        self.template.vertex_count()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.dim())
    }

    pub fn max_frames(&self) -> usize {
        self.samples.iter().map(|s| s.motion.frames()).max().unwrap_or(0)
    }

    pub fn lip_region(&self) -> RegionSet {
        RegionSet::new("lip", &self.manifest.lip_indices, self.vertices()).expect("validated")
    }

    pub fn upper_region(&self) -> RegionSet {
        RegionSet::new("upper", &self.manifest.upper_indices, self.vertices()).expect("validated")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_set_sorted_and_checked() {
        let r = RegionSet::new("lip", &[3, 1, 2], 4).unwrap();
        assert_eq!(r.indices(), &[1, 2, 3]);
        assert!(RegionSet::new("lip", &[1, 1], 4).is_err());
        assert!(RegionSet::new("lip", &[4], 4).is_err());
    }

    #[test]
    fn manifest_json_keys() {
        let m = DatasetManifest {
            template: "template.dtpl".into(),
            speakers: 2,
            entries: vec![ManifestEntry {
                speaker: 1,
                features: "a.dtft".into(),
                motion: "a.dtmo".into(),
                split: Split::Val,
            }],
            lip_indices: vec![0, 1],
            upper_indices: vec![2, 3],
            upper_lip_indices: vec![],
            lower_lip_indices: vec![],
        };
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["entries", "lip_indices", "speakers", "template", "upper_indices"]
        );
        assert_eq!(v["entries"][0]["split"], "val");
        assert!(m.validate(4).is_ok());
    }

    #[test]
    fn overlapping_regions_rejected() {
        let m = DatasetManifest {
            template: String::new(),
            speakers: 1,
            entries: vec![],
            lip_indices: vec![0, 1],
            upper_indices: vec![1, 2],
            upper_lip_indices: vec![],
            lower_lip_indices: vec![],
        };
        assert!(m.validate(4).is_err());
    }
}
