//! 5×5 bitmaps for glyphs and shape sprites.

pub const GLYPH_SIZE: usize = 5;

pub type Bitmap = [[bool; GLYPH_SIZE]; GLYPH_SIZE];

const fn parse(rows: [&str; 5]) -> Bitmap {
    let mut out = [[false; GLYPH_SIZE]; GLYPH_SIZE];
    let mut r = 0;
    while r < 5 {
        let bytes = rows[r].as_bytes();
        let mut c = 0;
        while c < 5 {
            out[r][c] = bytes[c] == b'#';
            c += 1;
        }
        r += 1;
    }
    out
}

const GLYPH_ROWS: [(char, [&str; 5]); 36] = [
    ('A', [".###.", "#...#", "#####", "#...#", "#...#"]),
    ('B', ["####.", "#...#", "####.", "#...#", "####."]),
    ('C', [".####", "#....", "#....", "#....", ".####"]),
    ('D', ["####.", "#...#", "#...#", "#...#", "####."]),
    ('E', ["#####", "#....", "####.", "#....", "#####"]),
    ('F', ["#####", "#....", "####.", "#....", "#...."]),
    ('G', [".####", "#....", "#.###", "#...#", ".###."]),
    ('H', ["#...#", "#...#", "#####", "#...#", "#...#"]),
    ('I', ["#####", "..#..", "..#..", "..#..", "#####"]),
    ('J', ["..###", "...#.", "...#.", "#..#.", ".##.."]),
    ('K', ["#...#", "#..#.", "###..", "#..#.", "#...#"]),
    ('L', ["#....", "#....", "#....", "#....", "#####"]),
    ('M', ["#...#", "##.##", "#.#.#", "#...#", "#...#"]),
    ('N', ["#...#", "##..#", "#.#.#", "#..##", "#...#"]),
    ('O', [".###.", "#...#", "#...#", "#...#", ".###."]),
    ('P', ["####.", "#...#", "####.", "#....", "#...."]),
    ('Q', [".###.", "#...#", "#.#.#", "#..#.", ".##.#"]),
    ('R', ["####.", "#...#", "####.", "#..#.", "#...#"]),
    ('S', [".####", "#....", ".###.", "....#", "####."]),
    ('T', ["#####", "..#..", "..#..", "..#..", "..#.."]),
    ('U', ["#...#", "#...#", "#...#", "#...#", ".###."]),
    ('V', ["#...#", "#...#", "#...#", ".#.#.", "..#.."]),
    ('W', ["#...#", "#...#", "#.#.#", "##.##", "#...#"]),
    ('X', ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"]),
    ('Y', ["#...#", ".#.#.", "..#..", "..#..", "..#.."]),
    ('Z', ["#####", "...#.", "..#..", ".#...", "#####"]),
    ('0', [".###.", "#..##", "#.#.#", "##..#", ".###."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", ".###."]),
    ('2', [".###.", "#...#", "..##.", ".#...", "#####"]),
    ('3', ["####.", "....#", ".###.", "....#", "####."]),
    ('4', ["#..#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "####."]),
    ('6', [".###.", "#....", "####.", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", "..#.."]),
    ('8', [".###.", "#...#", ".###.", "#...#", ".###."]),
    ('9', [".###.", "#...#", ".####", "....#", ".###."]),
];

/// Sprites in the order of [`crate::data::vocab::SHAPES`].
const SHAPE_ROWS: [[&str; 5]; 4] = [
    [".###.", "#####", "#####", "#####", ".###."],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["..#..", ".#.#.", ".#.#.", "#...#", "#####"],
    ["..#..", "..#..", "#####", "..#..", "..#.."],
];

pub fn glyph_bitmap(c: char) -> Option<Bitmap> {
    GLYPH_ROWS.iter().find(|(g, _)| *g == c).map(|(_, rows)| parse(*rows))
}

pub fn shape_bitmap(shape: usize) -> Bitmap {
    parse(SHAPE_ROWS[shape])
}
