//! RGB values for the prompt vocabulary's color words.

use crate::prompt::{COLORS, HAND_COLORS};

pub const HAND_RGB: [[u8; 3]; 7] = [
    [240, 226, 214], // white
    [96, 60, 40],    // dark brown
    [242, 190, 160], // peach
    [152, 102, 70],  // brown
    [238, 224, 168], // pale yellow
    [230, 206, 180], // light beige
    [52, 36, 30],    // black
];

pub const COLOR_RGB: [[u8; 3]; 20] = [
    [112, 122, 98],  // mountain
    [62, 112, 152],  // lake
    [246, 240, 222], // bright
    [32, 30, 36],    // dark
    [42, 150, 62],   // green
    [122, 52, 150],  // purple
    [246, 246, 246], // white
    [236, 210, 40],  // yellow
    [136, 200, 236], // sky blue
    [10, 10, 10],    // black
    [240, 140, 30],  // orange
    [202, 30, 30],   // red
    [30, 60, 202],   // blue
    [250, 240, 160], // light yellow
    [128, 128, 128], // gray
    [226, 210, 176], // beige
    [240, 160, 190], // pink
    [120, 76, 40],   // brown
    [232, 232, 232], // dotted
    [90, 160, 80],   // flower
];

pub fn hand_rgb(name: &str) -> Option<[u8; 3]> {
    HAND_COLORS.iter().position(|c| *c == name).map(|i| HAND_RGB[i])
}

pub fn color_rgb(name: &str) -> Option<[u8; 3]> {
    COLORS.iter().position(|c| *c == name).map(|i| COLOR_RGB[i])
}
