//! Class universe shared by masks, prompts and segmenters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    /// Prototype RGB color in [0,1]^3.
    pub color: [f64; 3],
}

/// Ordered class list. Ids are contiguous from 0 and id 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
}

/// Sidecar document layout: `{"<class_id>": {"name": ..., "color": [r, g, b]}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarEntry {
    name: String,
    color: [f64; 3],
}

pub const PASCAL_VOC_NAMES: [&str; 21] = [
    "background",
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

impl ClassVocabulary {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        if entries.len() > 256 {
            return Err(Error::Config("vocabulary exceeds 256 classes".into()));
        }
        let mut names = std::collections::HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::Config(format!(
                    "class ids must be contiguous from 0; position {i} has id {}",
                    e.id
                )));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate class name `{}`", e.name)));
            }
            if e.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Config(format!(
                    "class `{}` color {:?} outside [0,1]",
                    e.name, e.color
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Builds a vocabulary from `(name, color)` pairs; the first is background.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, [f64; 3])>) -> Result<Self> {
        let entries = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (name, color))| ClassEntry {
                id: u8::try_from(i).unwrap_or(u8::MAX),
                name: name.into(),
                color,
            })
            .collect();
        Self::new(entries)
    }

    /// Small five-class vocabulary with well-separated prototype colors.
    pub fn toy() -> Self {
        Self::from_pairs([
            ("background", [0.0, 0.0, 0.0]),
            ("cat", [0.9, 0.1, 0.1]),
            ("dog", [0.1, 0.8, 0.2]),
            ("car", [0.15, 0.25, 0.9]),
            ("bird", [0.95, 0.85, 0.1]),
        ])
        .expect("toy vocabulary is valid")
    }

    /// Pascal VOC classes with the standard VOC palette as prototype colors.
    pub fn pascal_voc() -> Self {
        Self::from_pairs(
            PASCAL_VOC_NAMES
                .iter()
                .enumerate()
                .map(|(i, name)| (*name, voc_palette(i as u8))),
        )
        .expect("VOC vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn get(&self, id: u8) -> Option<&ClassEntry> {
        self.entries.get(id as usize)
    }

    pub fn name(&self, id: u8) -> &str {
        self.get(id).map(|e| e.name.as_str()).unwrap_or("<unknown>")
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn foreground(&self) -> impl Iterator<Item = &ClassEntry> {
        self.entries.iter().skip(1)
    }

    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for e in &self.entries {
            let entry = SidecarEntry {
                name: e.name.clone(),
                color: e.color,
            };
            map.insert(e.id.to_string(), serde_json::to_value(entry).expect("serializable"));
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BTreeMap<String, SidecarEntry> = serde_json::from_str(text)?;
        let mut entries = Vec::with_capacity(doc.len());
        for (key, value) in doc {
            let id: u8 = key
                .parse()
                .map_err(|_| Error::Config(format!("vocabulary key `{key}` is not a class id")))?;
            entries.push(ClassEntry {
                id,
                name: value.name,
                color: value.color,
            });
        }
        entries.sort_by_key(|e| e.id);
        Self::new(entries)
    }
}

impl Serialize for ClassVocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let value: serde_json::Value =
            serde_json::from_str(&self.to_json()).map_err(serde::ser::Error::custom)?;
        value.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassVocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        Self::from_json(&value.to_string()).map_err(serde::de::Error::custom)
    }
}

fn voc_palette(index: u8) -> [f64; 3] {
    let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
    let mut c = index;
    for j in 0..8 {
        r |= ((c >> 0) & 1) << (7 - j);
        g |= ((c >> 1) & 1) << (7 - j);
        b |= ((c >> 2) & 1) << (7 - j);
        c >>= 3;
    }
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}
