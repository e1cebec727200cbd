//! The eleven-subtask label domain: speaker self-reference (S), the nine
//! PHQ-9 symptoms (S1–S9), and the final depression decision (D).

use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One of the eleven screening subtasks, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subtask {
    S,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    S8,
    S9,
    D,
}

impl Subtask {
    /// All subtasks in canonical order: S, S1..S9, D.
    pub const ALL: [Subtask; 11] = [
        Subtask::S,
        Subtask::S1,
        Subtask::S2,
        Subtask::S3,
        Subtask::S4,
        Subtask::S5,
        Subtask::S6,
        Subtask::S7,
        Subtask::S8,
        Subtask::S9,
        Subtask::D,
    ];

    /// The nine PHQ-9 symptom subtasks S1..S9.
    pub const PHQ9: [Subtask; 9] = [
        Subtask::S1,
        Subtask::S2,
        Subtask::S3,
        Subtask::S4,
        Subtask::S5,
        Subtask::S6,
        Subtask::S7,
        Subtask::S8,
        Subtask::S9,
    ];

    /// Position in the canonical order, 0..=10.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }

    pub fn from_index(index: usize) -> Option<Subtask> {
        Self::ALL.get(index).copied()
    }

    /// Canonical label name as it appears in prompts and responses.
    pub fn name(self) -> &'static str {
        match self {
            Subtask::S => "S",
            Subtask::S1 => "S1",
            Subtask::S2 => "S2",
            Subtask::S3 => "S3",
            Subtask::S4 => "S4",
            Subtask::S5 => "S5",
            Subtask::S6 => "S6",
            Subtask::S7 => "S7",
            Subtask::S8 => "S8",
            Subtask::S9 => "S9",
            Subtask::D => "D",
        }
    }

    pub fn from_name(name: &str) -> Option<Subtask> {
        Self::ALL.iter().copied().find(|s| s.name() == name)
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Subtask {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Subtask {
    fn deserialize<D: Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(deserializer)?;
        Subtask::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown subtask name: {name}")))
    }
}

/// A binary annotation value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelValue {
    Yes,
    No,
}

impl LabelValue {
    /// Lenient parse from common spellings: yes/no, y/n, 1/0, true/false.
    pub fn parse(text: &str) -> Option<LabelValue> {
        match text.trim().to_ascii_lowercase().as_str() {
            "yes" | "y" | "1" | "true" => Some(LabelValue::Yes),
            "no" | "n" | "0" | "false" => Some(LabelValue::No),
            _ => None,
        }
    }
}

impl fmt::Display for LabelValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelValue::Yes => "yes",
            LabelValue::No => "no",
        })
    }
}

/// Label-occurrence selection scheme: first occurrence (IR) honors the
/// initial prediction, last occurrence (SR) honors in-text revisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionScheme {
    Ir,
    Sr,
}

impl ExtractionScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractionScheme::Ir => "ir",
            ExtractionScheme::Sr => "sr",
        }
    }

    pub fn parse(text: &str) -> Option<ExtractionScheme> {
        match text.trim().to_ascii_lowercase().as_str() {
            "ir" => Some(ExtractionScheme::Ir),
            "sr" => Some(ExtractionScheme::Sr),
            _ => None,
        }
    }
}

impl fmt::Display for ExtractionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The eleven labels in canonical slot order; a slot is `None` when the
/// label is absent (not extractable from a response).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SubtaskLabelSet {
    slots: [Option<LabelValue>; 11],
}

impl SubtaskLabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a complete set from eleven values in canonical order.
    pub fn complete(values: [LabelValue; 11]) -> Self {
        let mut slots = [None; 11];
        for (slot, value) in slots.iter_mut().zip(values) {
            *slot = Some(value);
        }
        Self { slots }
    }

    pub fn get(&self, subtask: Subtask) -> Option<LabelValue> {
        self.slots[subtask.index()]
    }

    pub fn set(&mut self, subtask: Subtask, value: Option<LabelValue>) {
        self.slots[subtask.index()] = value;
    }

    pub fn with(mut self, subtask: Subtask, value: LabelValue) -> Self {
        self.set(subtask, Some(value));
        self
    }

    /// True iff no slot is absent.
    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(|s| s.is_some())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Subtask, Option<LabelValue>)> + '_ {
        Subtask::ALL.iter().map(move |s| (*s, self.get(*s)))
    }

    /// Errors unless every slot is present; used to validate gold labels.
    pub fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            let missing: Vec<&str> = self
                .iter()
                .filter(|(_, v)| v.is_none())
                .map(|(s, _)| s.name())
                .collect();
            Err(Error::Validation(format!(
                "incomplete label set, missing: {}",
                missing.join(", ")
            )))
        }
    }
}

// Serialized as an object keyed by canonical label names, in canonical
// order, with null for absent slots. Field order is part of the snapshot
// format contract.
impl Serialize for SubtaskLabelSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(11))?;
        for (subtask, value) in self.iter() {
            map.serialize_entry(subtask.name(), &value)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for SubtaskLabelSet {
    fn deserialize<D: Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        struct SetVisitor;

        impl<'de> Visitor<'de> for SetVisitor {
            type Value = SubtaskLabelSet;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of subtask names to yes/no/null")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut access: A,
            ) -> std::result::Result<SubtaskLabelSet, A::Error> {
                let mut set = SubtaskLabelSet::new();
                while let Some((key, value)) =
                    access.next_entry::<String, Option<LabelValue>>()?
                {
                    let subtask = Subtask::from_name(&key).ok_or_else(|| {
                        serde::de::Error::custom(format!("unknown subtask name: {key}"))
                    })?;
                    set.set(subtask, value);
                }
                Ok(set)
            }
        }

        deserializer.deserialize_map(SetVisitor)
    }
}
