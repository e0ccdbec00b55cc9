//! LED encodings of the virtual robot face and the seven-action catalog.
//!
//! Wire format: five uppercase hex digits, `L R MM E` (left brow, right brow,
//! mouth, eyelid aperture).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::Emotion;

pub const BROW_LEDS: usize = 4;
pub const MOUTH_LEDS: usize = 6;
pub const MAX_EYELID_STEP: u8 = 5;
pub const ACTION_COUNT: usize = Emotion::COUNT;

/// Number of valid LED patterns: 16 · 16 · 64 · 6.
pub const PATTERN_COUNT: usize = 16 * 16 * 64 * 6;

/// Catalog encodings in emotion-code order.
const CATALOG: [&str; ACTION_COUNT] = [
    "C3185", // anger
    "99205", // disgust
    "66304", // fear
    "18015", // happiness
    "39042", // sadness
    "66335", // surprise
    "18185", // neutral (rest)
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ExpressionAction {
    action_id: Option<u8>,
    left_brow: u8,
    right_brow: u8,
    mouth: u8,
    eyelids: u8,
}

impl ExpressionAction {
    pub fn new(left_brow: u8, right_brow: u8, mouth: u8, eyelids: u8) -> Result<Self> {
        let field = |name: &'static str, v: u8, max: u8| {
            if v > max {
                Err(Error::Parse {
                    field: name,
                    reason: format!("{v:#X} exceeds {max:#X}"),
                })
            } else {
                Ok(())
            }
        };
        field("left_brow", left_brow, 0xF)?;
        field("right_brow", right_brow, 0xF)?;
        field("mouth", mouth, 0x3F)?;
        field("eyelids", eyelids, MAX_EYELID_STEP)?;
        let mut a = Self {
            action_id: None,
            left_brow,
            right_brow,
            mouth,
            eyelids,
        };
        a.action_id = CATALOG
            .iter()
            .position(|c| *c == a.encode())
            .map(|i| i as u8);
        Ok(a)
    }

    /// `None` for patterns outside the catalog.
    pub fn action_id(&self) -> Option<usize> {
        self.action_id.map(usize::from)
    }

    pub fn emotion(&self) -> Option<Emotion> {
        self.action_id().and_then(Emotion::from_code)
    }

    pub fn left_brow(&self) -> u8 {
        self.left_brow
    }

    pub fn right_brow(&self) -> u8 {
        self.right_brow
    }

    pub fn mouth(&self) -> u8 {
        self.mouth
    }

    pub fn eyelids(&self) -> u8 {
        self.eyelids
    }

    pub fn encode(&self) -> String {
        format!(
            "{:X}{:X}{:02X}{:X}",
            self.left_brow, self.right_brow, self.mouth, self.eyelids
        )
    }

    pub fn decode(s: &str) -> Result<Self> {
        if s.len() != 5 || !s.is_ascii() {
            return Err(Error::Parse {
                field: "encoding",
                reason: format!("expected 5 hex digits, got {s:?}"),
            });
        }
        let hex = |field: &'static str, range: std::ops::Range<usize>| {
            let digits = &s[range];
            if !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(Error::Parse {
                    field,
                    reason: format!("invalid hex {digits:?}"),
                });
            }
            Ok(u8::from_str_radix(digits, 16).expect("checked hex digits"))
        };
        Self::new(
            hex("left_brow", 0..1)?,
            hex("right_brow", 1..2)?,
            hex("mouth", 2..4)?,
            hex("eyelids", 4..5)?,
        )
    }

    /// One-hot vector over catalog actions.
    pub fn features(&self) -> Result<[f64; ACTION_COUNT]> {
        let id = self.action_id().ok_or_else(|| {
            Error::InvalidArgument(format!("{} is not a catalog action", self.encode()))
        })?;
        let mut v = [0.0; ACTION_COUNT];
        v[id] = 1.0;
        Ok(v)
    }

    /// Lit LED indices per subsystem, as drawn by a face view.
    pub fn led_layout(&self) -> LedLayout {
        let bits = |mask: u8, n: usize| (0..n).filter(|i| mask >> i & 1 == 1).collect();
        LedLayout {
            encoding: self.encode(),
            action_id: self.action_id(),
            emotion: self.emotion(),
            left_brow: bits(self.left_brow, BROW_LEDS),
            right_brow: bits(self.right_brow, BROW_LEDS),
            mouth: bits(self.mouth, MOUTH_LEDS),
            eyelids: self.eyelids,
        }
    }
}

impl fmt::Display for ExpressionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

impl FromStr for ExpressionAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::decode(s)
    }
}

impl TryFrom<String> for ExpressionAction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::decode(&s)
    }
}

impl From<ExpressionAction> for String {
    fn from(a: ExpressionAction) -> Self {
        a.encode()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedLayout {
    pub encoding: String,
    pub action_id: Option<usize>,
    pub emotion: Option<Emotion>,
    pub left_brow: Vec<usize>,
    pub right_brow: Vec<usize>,
    pub mouth: Vec<usize>,
    /// Aperture step, 0 closed to 5 wide open.
    pub eyelids: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionCatalog {
    actions: [ExpressionAction; ACTION_COUNT],
}

impl ActionCatalog {
    pub fn actions(&self) -> &[ExpressionAction; ACTION_COUNT] {
        &self.actions
    }

    pub fn get(&self, id: usize) -> Option<ExpressionAction> {
        self.actions.get(id).copied()
    }

    pub fn for_emotion(&self, e: Emotion) -> ExpressionAction {
        self.actions[e.code()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExpressionAction> {
        self.actions.iter()
    }

    pub fn len(&self) -> usize {
        ACTION_COUNT
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn action_catalog() -> ActionCatalog {
    ActionCatalog {
        actions: CATALOG.map(|s| ExpressionAction::decode(s).expect("catalog encodings are valid")),
    }
}

pub fn encode_action(a: &ExpressionAction) -> String {
    a.encode()
}

pub fn decode_action(s: &str) -> Result<ExpressionAction> {
    ExpressionAction::decode(s)
}

pub fn action_features(a: &ExpressionAction) -> Result<[f64; ACTION_COUNT]> {
    a.features()
}

/// Every valid LED pattern in encoding order.
pub fn all_patterns() -> impl Iterator<Item = ExpressionAction> {
    (0..16u8).flat_map(|l| {
        (0..16u8).flat_map(move |r| {
            (0..64u8).flat_map(move |m| {
                (0..=MAX_EYELID_STEP).map(move |e| ExpressionAction::new(l, r, m, e).expect("in range"))
            })
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn catalog_shape() {
        let c = action_catalog();
        assert_eq!(c.len(), 7);
        for (i, a) in c.iter().enumerate() {
            assert_eq!(a.action_id(), Some(i));
            assert_eq!(a.emotion(), Emotion::from_code(i));
            for b in c.iter().skip(i + 1) {
                assert_ne!(a.encode(), b.encode());
            }
        }
        assert_eq!(c.for_emotion(Emotion::Neutral).encode(), "18185");
    }

    #[test]
    fn catalog_is_pinned() {
        let joined: String = action_catalog().iter().map(|a| a.encode()).collect();
        assert_eq!(joined, "C3185992056630418015390426633518185");
        assert_eq!(crc32fast::hash(joined.as_bytes()), 0x9003_1256);
    }

    #[test]
    fn encode_examples() {
        assert_eq!(ExpressionAction::new(0, 0, 0, 0).unwrap().encode(), "00000");
        assert_eq!(ExpressionAction::new(0xF, 0xF, 0x3F, 5).unwrap().encode(), "FF3F5");
        let off = decode_action("00000").unwrap();
        assert_eq!((off.left_brow(), off.right_brow(), off.mouth(), off.eyelids()), (0, 0, 0, 0));
        assert_eq!(off.action_id(), None);
        assert!(off.led_layout().mouth.is_empty());
    }

    #[test]
    fn decode_errors_name_the_field() {
        let field = |s: &str| match decode_action(s) {
            Err(Error::Parse { field, .. }) => field,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(field("ZZZZZ"), "left_brow");
        assert_eq!(field("FF3F9"), "eyelids");
        assert_eq!(field("FF405"), "mouth");
        assert_eq!(field("0000"), "encoding");
        assert_eq!(field("000000"), "encoding");
        assert_eq!(field("0G000"), "right_brow");
        assert_eq!(field("00+F0"), "mouth");
        assert_eq!(field("00é0"), "encoding");
        assert!(ExpressionAction::new(16, 0, 0, 0).is_err());
        assert!(ExpressionAction::new(0, 0, 64, 0).is_err());
        assert!(ExpressionAction::new(0, 0, 0, 6).is_err());
    }

    #[test]
    fn lowercase_hex_is_accepted_and_normalized() {
        assert_eq!(decode_action("c3185").unwrap().encode(), "C3185");
    }

    #[test]
    fn exhaustive_round_trip() {
        let mut n = 0;
        for a in all_patterns() {
            assert_eq!(decode_action(&encode_action(&a)).unwrap(), a);
            n += 1;
        }
        assert_eq!(n, PATTERN_COUNT);
    }

    #[test]
    fn one_hot_features() {
        let c = action_catalog();
        assert_eq!(c.get(0).unwrap().features().unwrap(), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        for a in c.iter() {
            let fa = a.features().unwrap();
            assert_eq!(fa.iter().sum::<f64>(), 1.0);
            for b in c.iter().filter(|b| b != &a) {
                let fb = b.features().unwrap();
                assert_eq!(fa.iter().zip(&fb).map(|(x, y)| x * y).sum::<f64>(), 0.0);
            }
        }
        assert!(action_features(&decode_action("00000").unwrap()).is_err());
    }

    #[test]
    fn led_layout_matches_masks() {
        let a = decode_action("C3185").unwrap();
        let l = a.led_layout();
        assert_eq!(l.left_brow, vec![2, 3]);
        assert_eq!(l.right_brow, vec![0, 1]);
        assert_eq!(l.mouth, vec![3, 4]);
        assert_eq!(l.eyelids, 5);
        assert_eq!(l.emotion, Some(Emotion::Anger));
    }

    #[test]
    fn serde_uses_the_encoding() {
        let a = action_catalog().for_emotion(Emotion::Happiness);
        let s = toml::to_string(&std::collections::BTreeMap::from([("a", a)])).unwrap();
        assert_eq!(s.trim(), "a = \"18015\"");
        let back: std::collections::BTreeMap<String, ExpressionAction> = toml::from_str(&s).unwrap();
        assert_eq!(back["a"], a);
    }

    proptest! {
        #[test]
        fn arbitrary_strings_never_panic(s in "\\PC{0,7}") {
            if let Ok(a) = decode_action(&s) {
                prop_assert_eq!(a.encode(), s.to_ascii_uppercase());
            }
        }

        #[test]
        fn layout_bits_reassemble_masks(l in 0u8..16, r in 0u8..16, m in 0u8..64, e in 0u8..6) {
            let lay = ExpressionAction::new(l, r, m, e).unwrap().led_layout();
            let fold = |v: &[usize]| v.iter().fold(0u8, |acc, i| acc | 1 << i);
            prop_assert_eq!(fold(&lay.left_brow), l);
            prop_assert_eq!(fold(&lay.right_brow), r);
            prop_assert_eq!(fold(&lay.mouth), m);
            prop_assert_eq!(lay.eyelids, e);
        }
    }
}
