//! Text prompt vocabulary and the combinatorial prompt space used for
//! style augmentation.
//!
//! A prompt is assembled from five slots, in order: head, hand color,
//! hand phrase, color and background. Rendering joins the selected entries
//! with single spaces, so `[0, 0, 0, 0, 0]` renders as
//! `"a cropped image of white hand with mountain room"`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADS: [&str; 7] =
    ["a cropped image of", "a image of", "a cropped photo of", "a picture of", "one", "a photo of", "a photo of right"];

pub const HAND_COLORS: [&str; 7] = ["white", "dark brown", "peach", "brown", "pale yellow", "light beige", "black"];

pub const HAND_PHRASES: [&str; 2] = ["hand with", "right hand with"];

/// The two color sub-columns merged row by row (left entry, then right entry
/// of each row). The vocabulary lists "yellow" twice in its right column; the
/// second occurrence is rendered as "light yellow" so every configuration
/// yields a distinct text.
pub const COLORS: [&str; 20] = [
    "mountain",
    "lake",
    "bright",
    "dark",
    "green",
    "purple",
    "white",
    "yellow",
    "sky blue",
    "black",
    "orange",
    "red",
    "blue",
    "light yellow",
    "gray",
    "beige",
    "pink",
    "brown",
    "dotted",
    "flower",
];

pub const BACKGROUNDS: [&str; 2] = ["room", "background"];

/// Number of distinct prompt configurations.
pub const NUM_PROMPTS: usize = HEADS.len() * HAND_COLORS.len() * HAND_PHRASES.len() * COLORS.len() * BACKGROUNDS.len();

/// The five named option lists, in slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOptions {
    pub head: &'static [&'static str],
    pub hand_color: &'static [&'static str],
    pub hand_phrase: &'static [&'static str],
    pub color: &'static [&'static str],
    pub background: &'static [&'static str],
}

impl PromptOptions {
    pub fn lens(&self) -> [usize; 5] {
        [self.head.len(), self.hand_color.len(), self.hand_phrase.len(), self.color.len(), self.background.len()]
    }
}

pub fn list_options() -> PromptOptions {
    PromptOptions {
        head: &HEADS,
        hand_color: &HAND_COLORS,
        hand_phrase: &HAND_PHRASES,
        color: &COLORS,
        background: &BACKGROUNDS,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptConfig {
    pub head: usize,
    pub hand_color: usize,
    pub hand_phrase: usize,
    pub color: usize,
    pub background: usize,
}

impl PromptConfig {
    pub fn new(head: usize, hand_color: usize, hand_phrase: usize, color: usize, background: usize) -> Self {
        Self { head, hand_color, hand_phrase, color, background }
    }

    fn indices(&self) -> [usize; 5] {
        [self.head, self.hand_color, self.hand_phrase, self.color, self.background]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["head", "hand_color", "hand_phrase", "color", "background"];
        let lens = list_options().lens();
        for ((idx, len), name) in self.indices().into_iter().zip(lens).zip(names) {
            if idx >= len {
                return Err(Error::InvalidConfig(format!("{name} index {idx} out of range (0..{len})")));
            }
        }
        Ok(())
    }

    /// Position of this config in lexicographic enumeration order.
    pub fn ordinal(&self) -> usize {
        let lens = list_options().lens();
        self.indices().into_iter().zip(lens).fold(0, |acc, (idx, len)| acc * len + idx)
    }

    /// Inverse of [`PromptConfig::ordinal`]. `ordinal` must be below [`NUM_PROMPTS`].
    pub fn from_ordinal(ordinal: usize) -> Self {
        debug_assert!(ordinal < NUM_PROMPTS);
        let lens = list_options().lens();
        let mut rest = ordinal;
        let mut idx = [0usize; 5];
        for slot in (0..5).rev() {
            idx[slot] = rest % lens[slot];
            rest /= lens[slot];
        }
        Self::new(idx[0], idx[1], idx[2], idx[3], idx[4])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub config: PromptConfig,
}

pub fn render_prompt(config: PromptConfig) -> Result<Prompt> {
    config.validate()?;
    let text = [
        HEADS[config.head],
        HAND_COLORS[config.hand_color],
        HAND_PHRASES[config.hand_phrase],
        COLORS[config.color],
        BACKGROUNDS[config.background],
    ]
    .join(" ");
    Ok(Prompt { text, config })
}

pub fn enumerate_prompts() -> Vec<Prompt> {
    (0..NUM_PROMPTS).map(|i| render_prompt(PromptConfig::from_ordinal(i)).expect("ordinal is in range")).collect()
}

/// Uniform draw over all configurations, fully determined by `seed`.
pub fn sample_prompt(seed: u64) -> Prompt {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ordinal = rng.gen_range(0..NUM_PROMPTS);
    render_prompt(PromptConfig::from_ordinal(ordinal)).expect("ordinal is in range")
}
