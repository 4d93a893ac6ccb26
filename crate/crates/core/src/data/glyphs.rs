//! Stroke glyphs on a 4 x 6 design grid (x right, y down), used by the
//! synthetic text renderer so generation needs no font files.

pub const GLYPH_WIDTH: f64 = 4.0;
pub const GLYPH_HEIGHT: f64 = 6.0;
/// Horizontal advance per character, in grid units.
pub const ADVANCE: f64 = 5.0;

type Stroke = &'static [(u8, u8)];

const A: &[Stroke] = &[&[(0, 6), (2, 0), (4, 6)], &[(1, 3), (3, 3)]];
const B: &[Stroke] = &[
    &[(0, 6), (0, 0), (3, 0), (4, 1), (4, 2), (3, 3), (0, 3)],
    &[(3, 3), (4, 4), (4, 5), (3, 6), (0, 6)],
];
const C: &[Stroke] = &[&[
    (4, 1),
    (3, 0),
    (1, 0),
    (0, 1),
    (0, 5),
    (1, 6),
    (3, 6),
    (4, 5),
]];
const D: &[Stroke] = &[&[(0, 0), (0, 6), (3, 6), (4, 5), (4, 1), (3, 0), (0, 0)]];
const E: &[Stroke] = &[&[(4, 0), (0, 0), (0, 6), (4, 6)], &[(0, 3), (3, 3)]];
const F: &[Stroke] = &[&[(4, 0), (0, 0), (0, 6)], &[(0, 3), (3, 3)]];
const G: &[Stroke] = &[&[
    (4, 1),
    (3, 0),
    (1, 0),
    (0, 1),
    (0, 5),
    (1, 6),
    (3, 6),
    (4, 5),
    (4, 3),
    (2, 3),
]];
const H: &[Stroke] = &[&[(0, 0), (0, 6)], &[(4, 0), (4, 6)], &[(0, 3), (4, 3)]];
const I: &[Stroke] = &[&[(1, 0), (3, 0)], &[(2, 0), (2, 6)], &[(1, 6), (3, 6)]];
const J: &[Stroke] = &[&[(4, 0), (4, 5), (3, 6), (1, 6), (0, 5)]];
const K: &[Stroke] = &[&[(0, 0), (0, 6)], &[(4, 0), (0, 3), (4, 6)]];
const L: &[Stroke] = &[&[(0, 0), (0, 6), (4, 6)]];
const M: &[Stroke] = &[&[(0, 6), (0, 0), (2, 3), (4, 0), (4, 6)]];
const N: &[Stroke] = &[&[(0, 6), (0, 0), (4, 6), (4, 0)]];
const O: &[Stroke] = &[&[
    (1, 0),
    (3, 0),
    (4, 1),
    (4, 5),
    (3, 6),
    (1, 6),
    (0, 5),
    (0, 1),
    (1, 0),
]];
const P: &[Stroke] = &[&[(0, 6), (0, 0), (3, 0), (4, 1), (4, 2), (3, 3), (0, 3)]];
const Q: &[Stroke] = &[
    &[
        (1, 0),
        (3, 0),
        (4, 1),
        (4, 5),
        (3, 6),
        (1, 6),
        (0, 5),
        (0, 1),
        (1, 0),
    ],
    &[(2, 4), (4, 6)],
];
const R: &[Stroke] = &[
    &[(0, 6), (0, 0), (3, 0), (4, 1), (4, 2), (3, 3), (0, 3)],
    &[(2, 3), (4, 6)],
];
const S: &[Stroke] = &[&[
    (4, 1),
    (3, 0),
    (1, 0),
    (0, 1),
    (0, 2),
    (1, 3),
    (3, 3),
    (4, 4),
    (4, 5),
    (3, 6),
    (1, 6),
    (0, 5),
]];
const T: &[Stroke] = &[&[(0, 0), (4, 0)], &[(2, 0), (2, 6)]];
const U: &[Stroke] = &[&[(0, 0), (0, 5), (1, 6), (3, 6), (4, 5), (4, 0)]];
const V: &[Stroke] = &[&[(0, 0), (2, 6), (4, 0)]];
const W: &[Stroke] = &[&[(0, 0), (1, 6), (2, 3), (3, 6), (4, 0)]];
const X: &[Stroke] = &[&[(0, 0), (4, 6)], &[(4, 0), (0, 6)]];
const Y: &[Stroke] = &[&[(0, 0), (2, 3), (4, 0)], &[(2, 3), (2, 6)]];
const Z: &[Stroke] = &[&[(0, 0), (4, 0), (0, 6), (4, 6)]];

const ALPHABET: [&[Stroke]; 26] = [
    A, B, C, D, E, F, G, H, I, J, K, L, M, N, O, P, Q, R, S, T, U, V, W, X, Y, Z,
];

pub const CHARSET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Strokes for an uppercase ASCII letter.
pub fn glyph(c: char) -> Option<&'static [Stroke]> {
    let c = c.to_ascii_uppercase();
    c.is_ascii_uppercase()
        .then(|| ALPHABET[(c as u8 - b'A') as usize])
}

/// Line segments of `text` in grid units, characters laid out left to right.
pub fn layout(text: &str) -> Vec<((f64, f64), (f64, f64))> {
    let mut segs = Vec::new();
    for (i, ch) in text.chars().enumerate() {
        let Some(strokes) = glyph(ch) else { continue };
        let ox = i as f64 * ADVANCE;
        for stroke in strokes {
            for pair in stroke.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                segs.push(((ox + a.0 as f64, a.1 as f64), (ox + b.0 as f64, b.1 as f64)));
            }
        }
    }
    segs
}

/// Width of the laid-out skeleton in grid units.
pub fn layout_width(chars: usize) -> f64 {
    if chars == 0 {
        0.0
    } else {
        (chars - 1) as f64 * ADVANCE + GLYPH_WIDTH
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_letter_stays_on_grid() {
        for c in CHARSET.chars() {
            let g = glyph(c).unwrap();
            assert!(!g.is_empty());
            for s in g {
                assert!(s.len() >= 2);
                for &(x, y) in *s {
                    assert!(x as f64 <= GLYPH_WIDTH && y as f64 <= GLYPH_HEIGHT, "{c}");
                }
            }
        }
        assert!(glyph('3').is_none());
        assert_eq!(glyph('a'), glyph('A'));
    }

    #[test]
    fn layout_advances() {
        let segs = layout("II");
        let max_x = segs.iter().map(|s| s.0 .0.max(s.1 .0)).fold(0.0, f64::max);
        assert_eq!(max_x, 8.0);
        assert_eq!(layout_width(2), 9.0);
    }
}
