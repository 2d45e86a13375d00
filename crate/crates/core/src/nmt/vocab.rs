//! Unit vocabulary with reserved control and tag indices.

use std::collections::HashMap;

use crate::reserved::PROTECTED_TOKENS;

pub const PAD_UNIT: &str = "<pad>";
pub const BOS_UNIT: &str = "<bos>";
pub const EOS_UNIT: &str = "<eos>";
pub const UNK_UNIT: &str = "<unk>";

/// Bijective map between subword units and ids in `[0, size)`.
///
/// Ids 0..=3 are `<pad>`, `<bos>`, `<eos>`, `<unk>`; ids 4..=7 are the
/// protected tag tokens. Remaining units are numbered in first-seen order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, u32>,
    units: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus units in iteration order; duplicates
    /// and units equal to reserved surface forms are skipped.
    pub fn from_units<S: AsRef<str>>(corpus_units: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Vocabulary {
            id_of: HashMap::new(),
            units: Vec::new(),
        };
        for unit in [PAD_UNIT, BOS_UNIT, EOS_UNIT, UNK_UNIT]
            .into_iter()
            .chain(PROTECTED_TOKENS)
        {
            vocab.insert(unit);
        }
        for unit in corpus_units {
            vocab.insert(unit.as_ref());
        }
        vocab
    }

    fn insert(&mut self, unit: &str) {
        if !self.id_of.contains_key(unit) {
            let id = self.units.len() as u32;
            self.id_of.insert(unit.to_string(), id);
            self.units.push(unit.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved units are always present
    }

    pub fn id(&self, unit: &str) -> Option<u32> {
        self.id_of.get(unit).copied()
    }

    pub fn id_or_unk(&self, unit: &str) -> u32 {
        self.id(unit).unwrap_or(Self::UNK)
    }

    pub fn unit(&self, id: u32) -> Option<&str> {
        self.units.get(id as usize).map(String::as_str)
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;

    /// Encodes units to ids, mapping unknown units to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, units: &[S]) -> Vec<u32> {
        units.iter().map(|u| self.id_or_unk(u.as_ref())).collect()
    }

    /// Decodes ids back to unit strings, skipping control ids.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id > Self::UNK || id == Self::UNK)
            .filter(|&&id| id != Self::PAD && id != Self::BOS && id != Self::EOS)
            .filter_map(|&id| self.unit(id))
            .map(str::to_string)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_stable() {
        let v = Vocabulary::from_units(["a", "b"]);
        assert_eq!(v.id(PAD_UNIT), Some(0));
        assert_eq!(v.id(BOS_UNIT), Some(1));
        assert_eq!(v.id(EOS_UNIT), Some(2));
        assert_eq!(v.id(UNK_UNIT), Some(3));
        assert_eq!(v.id("<S>"), Some(4));
        assert_eq!(v.id("<C>"), Some(5));
        assert_eq!(v.id("</C>"), Some(6));
        assert_eq!(v.id("MASK"), Some(7));
        assert_eq!(v.id("a"), Some(8));
        assert_eq!(v.id("b"), Some(9));
    }

    #[test]
    fn bijection_and_first_seen_order() {
        let v = Vocabulary::from_units(["x", "y", "x", "<S>", "z"]);
        assert_eq!(v.len(), 8 + 3, "duplicates and reserved units are not re-added");
        for id in 0..v.len() as u32 {
            let unit = v.unit(id).unwrap();
            assert_eq!(v.id(unit), Some(id));
        }
        assert!(v.id("x").unwrap() < v.id("y").unwrap());
        assert!(v.id("y").unwrap() < v.id("z").unwrap());
    }

    #[test]
    fn encode_maps_unknown_to_unk() {
        let v = Vocabulary::from_units(["a"]);
        assert_eq!(v.encode(&["a", "never-seen"]), vec![8, Vocabulary::UNK]);
    }

    #[test]
    fn decode_strips_control_ids() {
        let v = Vocabulary::from_units(["a", "b"]);
        let ids = [Vocabulary::BOS, 8, 9, Vocabulary::EOS, Vocabulary::PAD];
        assert_eq!(v.decode(&ids), vec!["a".to_string(), "b".to_string()]);
    }
}
